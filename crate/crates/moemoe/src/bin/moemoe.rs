fn main() {
    std::process::exit(moemoe::cli::main_from_env());
}
