fn main() {
    std::process::exit(clip2scene_cli::run(std::env::args_os()));
}
