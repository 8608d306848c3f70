fn main() {
    std::process::exit(rdslab_cli::run(std::env::args_os()));
}
