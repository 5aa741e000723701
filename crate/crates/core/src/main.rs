fn main() {
    let code = distner::cli::cli_main(std::env::args_os());
    distner::cli::flush_stdout();
    std::process::exit(code);
}
