fn main() {
    std::process::exit(cardiomotion::cli::main_with_args(std::env::args()));
}
