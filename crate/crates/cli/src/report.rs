//! CSV / JSON / SVG emitters. Reals are written with 17 significant digits so
//! repeated runs can be diffed byte for byte.

use std::fmt::Write;

use dmcr_core::network::byte_log_csv;
use dmcr_core::objective::LossBreakdown;
use ndarray::Array2;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{Evaluation, Prepared, Run, Trained};

pub fn real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn loss_rows(out: &mut String, round: usize, losses: &[LossBreakdown]) {
    for (node, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{round},{node},{},{},{},{},{}", real(l.rc), real(l.r), real(l.dual), real(l.penalty), real(l.total));
    }
}

pub fn loss_csv(trained: &Trained) -> String {
    match trained {
        Trained::Iid(s) | Trained::Noniid(dmcr_core::noniid::NoniidState { run: s, .. }) => {
            let mut out = String::from("round,node,rc,r,dual,penalty,total\n");
            loss_rows(&mut out, 0, &s.initial_losses);
            for (t, l) in s.losses.iter().enumerate() {
                loss_rows(&mut out, t + 1, l);
            }
            out
        }
        Trained::Dsgd(s) => {
            let mut out = String::from("round,node,cross_entropy\n");
            let rows = std::iter::once(&s.initial_losses).chain(&s.losses);
            for (t, l) in rows.enumerate() {
                for (node, v) in l.iter().enumerate() {
                    let _ = writeln!(out, "{t},{node},{}", real(*v));
                }
            }
            out
        }
    }
}

pub fn consensus_csv(trained: &Trained) -> String {
    let series = match trained {
        Trained::Iid(s) => &s.consensus,
        Trained::Noniid(s) => &s.run.consensus,
        Trained::Dsgd(s) => &s.consensus,
    };
    let mut out = String::from("round,max_gap\n");
    for (t, v) in series.iter().enumerate() {
        let _ = writeln!(out, "{},{}", t + 1, real(*v));
    }
    out
}

pub fn byte_log(trained: &Trained) -> &[(usize, usize, u64)] {
    match trained {
        Trained::Iid(s) => &s.byte_log,
        Trained::Noniid(s) => &s.run.byte_log,
        Trained::Dsgd(s) => &s.byte_log,
    }
}

pub fn matrix_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| real(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Heatmap of `|cos|`, one square per entry, dark = aligned.
pub fn cosine_svg(m: &Array2<f64>, cell: usize) -> String {
    let n = m.nrows();
    let size = n * cell;
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n");
    for (i, row) in m.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.abs().min(1.0))).round() as u8;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>",
                j * cell,
                i * cell
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn spectra_csv(evaluation: &Evaluation) -> String {
    let mut out = String::from("class,index,singular_value\n");
    for c in &evaluation.geometry.structure.classes {
        for (i, s) in c.singular_values.iter().enumerate() {
            let _ = writeln!(out, "{},{i},{}", c.class, real(*s));
        }
    }
    for (i, s) in evaluation.geometry.overall_spectrum.iter().enumerate() {
        let _ = writeln!(out, "all,{i},{}", real(*s));
    }
    out
}

pub fn trace_csv(state: &dmcr_core::noniid::NoniidState) -> String {
    let mut out = String::from("round,cluster,position,node,peer,peer_round,fresh,substituted_classes\n");
    for rec in &state.trace {
        for &(peer, peer_round) in &rec.peer_rounds {
            let subs: Vec<String> = rec.terms.iter().filter(|u| u.peer == peer && u.substituted).map(|u| u.class.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{peer},{peer_round},{},{}",
                rec.round,
                rec.cluster,
                rec.position,
                rec.node,
                u8::from(peer_round == rec.round),
                subs.join(" ")
            );
        }
    }
    out
}

pub fn partition_csv(prepared: &Prepared) -> String {
    let mut out = String::from("node,class,count,duplicated\n");
    for (node, s) in prepared.shards.iter().enumerate() {
        for (class, count) in s.class_counts().into_iter().enumerate() {
            let dup = prepared.duplication.get(&(node, class)).copied().unwrap_or(0);
            let _ = writeln!(out, "{node},{class},{count},{dup}");
        }
    }
    out
}

pub fn geometry_json(evaluation: &Evaluation, config: &ExperimentConfig, trained: Option<&Trained>) -> String {
    let mut value = serde_json::to_value(&evaluation.geometry).expect("report serializes");
    let obj = value.as_object_mut().expect("report is an object");
    obj.insert("accuracy".into(), evaluation.accuracy.into());
    obj.insert("tau".into(), config.eval.tau.into());
    if let Some(Trained::Noniid(s)) = trained {
        obj.insert("assumption_violation".into(), s.assumption_violation.clone().into());
        obj.insert("max_replica_gap".into(), s.max_replica_gap.into());
    }
    serde_json::to_string_pretty(&value).expect("json")
}

pub fn emit(run: &mut Run, config: &ExperimentConfig, prepared: &Prepared, trained: Option<&Trained>, evaluation: &Evaluation) -> Result<(), CliError> {
    if let Some(t) = trained {
        run.write("loss.csv", loss_csv(t))?;
        run.write("consensus.csv", consensus_csv(t))?;
        run.write("comm_bytes.csv", byte_log_csv(byte_log(t)))?;
        if let Trained::Noniid(s) = t {
            run.write("cluster_trace.csv", trace_csv(s))?;
        }
    }
    run.write("partition.csv", partition_csv(prepared))?;
    run.write("geometry.json", geometry_json(evaluation, config, trained))?;
    run.write("cosine.csv", matrix_csv(&evaluation.cosine))?;
    run.write("cosine_labels.csv", evaluation.cosine_labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n") + "\n")?;
    run.write("cosine.svg", cosine_svg(&evaluation.cosine, 4))?;
    run.write("spectra.csv", spectra_csv(evaluation))?;
    Ok(())
}
