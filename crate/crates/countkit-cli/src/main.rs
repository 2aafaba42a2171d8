use countkit_cli::CliError;

fn main() {
    let code = match countkit_cli::run(std::env::args()) {
        Ok(()) => 0,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    };
    std::process::exit(code);
}
