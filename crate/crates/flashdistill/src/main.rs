fn main() {
    std::process::exit(flashdistill::cli::run());
}
