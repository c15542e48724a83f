fn main() {
    let code = milfcn_cli::run(std::env::args_os());
    std::process::exit(code);
}
