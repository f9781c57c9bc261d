use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use mspred_core::config::Precision;
use mspred_core::model::AblationRow;
use mspred_core::predictor::CellKind;
use mspred_core::Result;

use crate::eval::{load_sequences, write_report};
use crate::run::{evaluate_checkpoint, load_config, train_model, write_file, RunDir};
use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Ablation rows to run, in output order.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    rows: Vec<u8>,
    /// Directory holding one run per row plus the combined table.
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    /// Dataset container; defaults to the test set described by the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

pub struct RowResult {
    pub row: AblationRow,
    pub values: [f64; 4],
}

pub fn run(args: AblateArgs) -> Result<()> {
    let base = load_config(&args.config)?;
    let rows = args.rows.iter().map(|&r| AblationRow::new(r)).collect::<Result<Vec<_>>>()?;
    let sequences = load_sequences(args.dataset.as_deref(), &base)?;
    let mut results = Vec::new();
    for row in rows {
        let mut cfg = base.clone();
        cfg.model = row.apply(&base.model);
        cfg.run_name = format!("{}-row{}", base.run_name, row.id());
        cfg.validate()?;
        let dir = RunDir::new(args.out.join(format!("row{}", row.id())));
        println!("row {}: training", row.id());
        let outcome = match cfg.precision {
            Precision::F32 => train_model::<f32>(&cfg, &dir, false, args.quiet)?,
            Precision::F64 => train_model::<f64>(&cfg, &dir, false, args.quiet)?,
        };
        let (report, _) = evaluate_checkpoint(&outcome.checkpoint, &sequences, &cfg.lpips_plugin, cfg.eval_batch_size)?;
        write_report(&dir, &report)?;
        let get = |m: &str| report.overall(m).unwrap_or(f64::NAN);
        results.push(RowResult { row, values: [get("mse"), get("psnr"), get("ssim"), get("lpips")] });
    }
    write_file(&args.out.join("ablation.csv"), table_csv(&results))?;
    let md = table_markdown(&results);
    write_file(&args.out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn describe(row: AblationRow) -> (&'static str, &'static str, &'static str) {
    let (cell, spatial, temporal) = row.flags();
    let yes = |b: bool| if b { "yes" } else { "no" };
    (if cell == CellKind::Convolutional { "convlstm" } else { "lstm" }, yes(spatial), yes(temporal))
}

pub fn table_csv(results: &[RowResult]) -> String {
    let mut s = String::from("row,cell,spatial,temporal,mse,psnr,ssim,lpips\n");
    for r in results {
        let (c, sp, te) = describe(r.row);
        let [a, b, cc, d] = r.values;
        let _ = writeln!(s, "{},{c},{sp},{te},{a},{b},{cc},{d}", r.row.id());
    }
    s
}

pub fn table_markdown(results: &[RowResult]) -> String {
    let mut s = String::from("| row | cell | spatial | temporal | MSE ↓ | PSNR ↑ | SSIM ↑ | LPIPS ↓ |\n|---|---|---|---|---|---|---|---|\n");
    for r in results {
        let (c, sp, te) = describe(r.row);
        let [a, b, cc, d] = r.values;
        let _ = writeln!(s, "| {} | {c} | {sp} | {te} | {a:.5} | {b:.2} | {cc:.4} | {d:.4} |", r.row.id());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_keep_request_order() {
        let results: Vec<RowResult> = [5u8, 1]
            .iter()
            .map(|&i| RowResult { row: AblationRow::new(i).unwrap(), values: [0.01, 20.0, 0.9, 0.1] })
            .collect();
        let csv = table_csv(&results);
        let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(ids, ["5", "1"]);
        assert!(csv.starts_with("row,cell,spatial,temporal,mse,psnr,ssim,lpips"));
        assert!(table_markdown(&results).contains("| 5 | convlstm | no | no |"));
    }
}
