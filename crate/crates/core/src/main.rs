fn main() {
    std::process::exit(ehr_coagent::cli::run(std::env::args_os()));
}
