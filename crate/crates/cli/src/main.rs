fn main() {
    std::process::exit(blocktower_cli::run(std::env::args_os()));
}
