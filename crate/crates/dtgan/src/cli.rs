//! Command-line entry point (placeholder while the library stabilizes).

pub fn run() -> i32 {
    eprintln!("ERROR:USAGE: cli not wired yet");
    2
}
