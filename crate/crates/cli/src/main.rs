fn main() {
    std::process::exit(vesselseg_cli::dispatch(std::env::args_os()));
}
