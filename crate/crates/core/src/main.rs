use std::io::Write;

fn main() {
    let stdin = std::io::stdin();
    let out = trusted_server::cli::run_command_with_input(std::env::args_os(), &mut stdin.lock());
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    let _ = std::io::stdout().flush();
    std::process::exit(out.status);
}
