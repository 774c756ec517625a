fn main() {
    std::process::exit(pbsd_lab::cli_io::dispatch(std::env::args_os()));
}
