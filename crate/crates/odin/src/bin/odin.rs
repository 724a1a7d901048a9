fn main() {
    std::process::exit(odin::cli::run());
}
