fn main() {
    std::process::exit(ultralidar::cli::run(std::env::args_os().skip(1)));
}
