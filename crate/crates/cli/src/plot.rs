//! Static SVG charts.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use tokflow::train::{cell_mean, AblationRow, StepRecord};

pub fn loss_curves(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(anyhow!("no metric records to plot"));
    }
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let x_max = records.last().unwrap().step as f64 + 1.0;
    let y_max = records.iter().map(|r| r.total).fold(0.0, f64::max) * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .caption("training loss", ("sans-serif", 20))
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw()?;
    let series: [(&str, fn(&StepRecord) -> f64, RGBColor); 3] = [
        ("semantic", |r| r.sem_loss, BLUE),
        ("flow", |r| r.cfm_loss, RED),
        ("total", |r| r.total, BLACK),
    ];
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(records.iter().map(|r| (r.step as f64, f(r))), color))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
    root.present()?;
    Ok(())
}

/// Seed-averaged lexical and syntactic accuracy per cell.
pub fn ablation_bars(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut cells = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell) {
            cells.push(r.cell);
        }
    }
    if cells.is_empty() {
        return Err(anyhow!("no ablation rows to plot"));
    }
    let root = SVGBackend::new(path, (200 + 110 * cells.len() as u32, 520)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = cells.len();
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(90)
        .y_label_area_size(50)
        .caption("paired accuracy by cell", ("sans-serif", 20))
        .build_cartesian_2d(0.0..n as f64, 0.0..100.0)?;
    let labels: Vec<String> = cells.iter().map(|c| format!("{} {}", c.input_mode, c.objective())).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = (x - 0.5).round();
            if i >= 0.0 && (i as usize) < labels.len() && (x - 0.5 - i).abs() < 1e-6 {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .y_desc("accuracy (%)")
        .draw()?;
    for (offset, metric, color) in [(0.1, "lexical_acc", BLUE), (0.5, "syntactic_acc", RED)] {
        let bars = cells.iter().enumerate().filter_map(|(i, c)| {
            let v = 100.0 * cell_mean(rows, c, metric)?;
            let x0 = i as f64 + offset;
            Some(Rectangle::new([(x0, 0.0), (x0 + 0.4, v)], color.filled()))
        });
        chart
            .draw_series(bars)?
            .label(metric)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
    root.present()?;
    Ok(())
}
