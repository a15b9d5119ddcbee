fn main() {
    let code = udaclr::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
