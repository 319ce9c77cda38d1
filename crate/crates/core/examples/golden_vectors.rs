//! Writes the golden suite to a temporary directory, checks it, then flips
//! one byte of an expected output and checks again.

use concertormer::golden::{check, default_suite, generate, read_manifest};

fn main() -> concertormer::Result<()> {
    let dir = std::env::temp_dir().join(format!("concertormer-golden-{}", std::process::id()));
    generate(&dir, &default_suite(0))?;
    let report = |label: &str| -> concertormer::Result<()> {
        let results = check(&dir)?;
        let failed = results.iter().filter(|r| !r.passed()).count();
        println!("{label}: {} cases, {failed} failed", results.len());
        results.iter().filter(|r| !r.passed()).for_each(|r| println!("  {r}"));
        Ok(())
    };
    report("fresh suite")?;
    let victim = read_manifest(&dir)?.cases[0].expected.clone();
    let path = dir.join(victim);
    let mut bytes = std::fs::read(&path)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 0x80;
    std::fs::write(&path, bytes)?;
    report("after flipping one byte")?;
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
