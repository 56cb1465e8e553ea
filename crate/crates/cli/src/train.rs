use std::path::Path;

use clap::Args;
use csicl_core::trainer::{run_session, SessionOptions, SessionReport};
use csicl_edge::bundle::{serialize_full, serialize_light};

use crate::failure::{create_dir, write_output, CliResult};
use crate::source::DataArgs;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Also train the naive fine-tuning baseline.
    #[arg(long)]
    pub naive: bool,
    /// Skip distilling the lightweight model.
    #[arg(long)]
    pub no_distill: bool,
}

pub fn run(args: &TrainArgs, out: &Path) -> CliResult<SessionReport> {
    let p = args.data.prepare()?;
    let bundles = out.join("bundles");
    create_dir(&bundles)?;
    write_output(&out.join("config.toml"), p.cfg.to_toml_string())?;
    log::info!("schedule {:?}", p.schedule.tasks());

    let opts = SessionOptions {
        distill: !args.no_distill,
        naive: args.naive,
    };
    let mut write_err = None;
    let report = run_session(&p.train, &p.test, &p.schedule, &p.cfg, opts, |o| {
        let save = || -> CliResult<()> {
            write_output(&bundles.join(format!("fsm_task{}.bin", o.task)), serialize_full(o.fsm))?;
            if let Some(lwm) = o.lwm {
                write_output(&bundles.join(format!("lwm_task{}.bin", o.task)), serialize_light(lwm))?;
            }
            Ok(())
        };
        if let Err(e) = save() {
            write_err = Some(e);
            return Err(csicl_core::Error::State("could not write bundle".into()));
        }
        Ok(())
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let report = report?;

    write_output(&out.join("report.json"), report.to_json())?;
    write_output(&out.join("alpha.csv"), report.alpha_csv())?;
    write_output(&out.join("timings.json"), report.timings_json())?;
    Ok(report)
}
