fn main() {
    std::process::exit(spaceedit_cli::run_command(std::env::args_os()));
}
