fn main() {
    eprintln!("tmxl: not yet wired up");
    std::process::exit(2);
}
