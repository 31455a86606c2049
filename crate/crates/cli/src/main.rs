use std::process::ExitCode;

fn main() -> ExitCode {
    let matches = xfer_cli::app::command().get_matches();
    match xfer_cli::app::run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
