fn main() {
    std::process::exit(inertia_map::cli::run(std::env::args_os()));
}
