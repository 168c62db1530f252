fn main() {
    eprintln!("maxlab: command-line interface not wired up yet");
    std::process::exit(2);
}
