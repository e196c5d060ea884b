fn main() {
    std::process::exit(ddpseg::driver::main_with(std::env::args_os()));
}
