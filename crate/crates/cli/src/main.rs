use std::path::PathBuf;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let env_out = std::env::var_os(camclass_cli::OUTPUT_DIR_ENV).map(PathBuf::from);
    let code = camclass_cli::run_with(
        std::env::args_os(),
        env_out,
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
