//! Regenerates `data/synthetic_population58.csv`:
//! `cargo run -p mstcar --example synthetic_population > crates/core/data/synthetic_population58.csv`

fn main() {
    let sites = mstcar::io::builtin::site_map("california58").unwrap();
    let table = mstcar::simstudy::synthetic_table_california58();
    mstcar::io::write_population_table(&table, &sites, std::io::stdout()).unwrap();
}
