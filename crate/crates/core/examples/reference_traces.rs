//! Regenerates the bundled synthetic ODMR traces in `data/traces/`.
//!
//! `cargo run --example reference_traces [-- OUT_DIR]`

use iontrack::odmr::reference_cases;
use iontrack::rng::seeded_stream;

fn main() -> std::io::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/traces").into());
    std::fs::create_dir_all(&out)?;
    for (k, case) in reference_cases().iter().enumerate() {
        let trace = case.synth(20.0, &mut seeded_stream(1, k as u64));
        let header = format!("# {} at SNR 20, true {}\n", case.name, case.params.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" "));
        std::fs::write(format!("{out}/{}.csv", case.name), header + &trace.to_csv())?;
    }
    Ok(())
}
