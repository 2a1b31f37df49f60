fn main() {
    std::process::exit(moon::run_cli());
}
