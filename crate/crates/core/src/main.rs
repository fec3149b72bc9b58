use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stackelberg::experiments::{cmd_diagnose, cmd_eval, cmd_gen_data, cmd_regret_sweep, cmd_train, Settings};
use stackelberg::Result;

/// Offline policy learning as a leader-follower game.
///
/// Every parameter can also be given in a key=value config file; flags win.
/// Output goes to --out-dir, defaulting to $STACKELBERG_OUT_DIR or ./out.
#[derive(Parser)]
#[command(name = "stackelberg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write an offline dataset.
    GenData(GenData),
    /// Run the two-timescale learner on a dataset.
    Train(Train),
    /// Monte Carlo evaluation of a trained or behavior policy.
    Eval(Eval),
    /// Exact-regret sweep over sample sizes and behavior noise levels.
    RegretSweep(RegretSweep),
    /// Coverage, kernel and equilibrium diagnostics.
    Diagnose(Diagnose),
}

/// Declares a flag struct whose options all map to settings keys.
macro_rules! flags {
    ($name:ident { $($field:ident),* $(,)? } switches { $($switch:ident),* $(,)? }) => {
        #[derive(Args)]
        struct $name {
            /// key=value config file; flags override its entries
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long)]
                $field: Option<String>,
            )*
            $(
                #[arg(long)]
                $switch: bool,
            )*
        }

        impl $name {
            fn settings(&self) -> Result<Settings> {
                let mut s = match &self.config {
                    Some(path) => Settings::from_file(path)?,
                    None => Settings::new(),
                };
                $(
                    if let Some(v) = &self.$field {
                        s.set(stringify!($field), v);
                    }
                )*
                $(
                    if self.$switch {
                        s.set(stringify!($switch), "true");
                    }
                )*
                Ok(s)
            }
        }
    };
}

flags!(GenData { env, env_seed, n, seed, alpha, fqi_rounds, degree, sigma0, out, out_dir } switches {});

flags!(Train {
    data, lambda, gamma, beta, solve_tol, c1, a1, c2, a2, iterations, batch, seed, eval_every,
    c_theta, c_omega, action_samples, init, policy_std, degree, bandwidth, dse_rows, out_dir, name
} switches { lambda_rule });

flags!(Eval { policy, data, seeds, episodes, seed, horizon, out, out_dir } switches {});

flags!(RegretSweep {
    env_seed, ns, sigma0s, seeds, master_seed, lambda, gamma, beta, solve_tol, c1, a1, c2, a2,
    iterations, batch, seed, eval_every, c_theta, c_omega, action_samples, init, policy_std, degree,
    bandwidth, dse_rows, threads, out, out_dir
} switches { lambda_rule, oracle });

flags!(Diagnose { data, policy, rollouts, seed, dse_rows, beta, solve_tol, out, out_dir } switches {});

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a.settings()?, &mut out).map(|_| ()),
        Command::Train(a) => cmd_train(&a.settings()?, &mut out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a.settings()?, &mut out).map(|_| ()),
        Command::RegretSweep(a) => cmd_regret_sweep(&a.settings()?, &mut out).map(|_| ()),
        Command::Diagnose(a) => cmd_diagnose(&a.settings()?, &mut out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
