fn main() {
    fewmark_core::cli::run_main();
}
