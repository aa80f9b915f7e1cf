//! Canned-report runner; see `gradepipe_core::fixture_runner`.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(gradepipe_core::fixture_runner::run(&args));
}
