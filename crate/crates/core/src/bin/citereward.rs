fn main() {
    std::process::exit(citereward::pipeline::main_with_args(std::env::args_os()));
}
