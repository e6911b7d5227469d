//! SVG charts rendered from run logs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use plotters::prelude::*;
use thiserror::Error;

use crate::harness::LogRow;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unknown plot kind `{0}`; valid kinds: prices, pool, training, netpos")]
    UnknownKind(String),
    #[error("log has no rows for {0}")]
    NoData(String),
    #[error("drawing failed: {0}")]
    Draw(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Prices and collateral factors over one episode.
    Prices,
    /// Utilization and pool net positions over one episode.
    Pool,
    /// Epsilon, score and loss per training episode.
    Training,
    /// Agent and benchmark total net position over one paired episode.
    NetPos,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::Prices, PlotKind::Pool, PlotKind::Training, PlotKind::NetPos];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Prices => "prices",
            PlotKind::Pool => "pool",
            PlotKind::Training => "training",
            PlotKind::NetPos => "netpos",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = PlotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PlotError::UnknownKind(s.to_string()))
    }
}

type Series = (String, Vec<(f64, f64)>);

struct Panel {
    title: String,
    series: Vec<Series>,
}

const COLORS: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

fn draw(path: &Path, title: &str, panels: &[Panel]) -> Result<(), PlotError> {
    let err = |e: &dyn fmt::Display| PlotError::Draw(e.to_string());
    let height = 300 * panels.len() as u32 + 40;
    let root = SVGBackend::new(path, (900, height)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let root = root
        .titled(title, ("sans-serif", 20))
        .map_err(|e| err(&e))?;
    let areas = root.split_evenly((panels.len(), 1));
    for (area, panel) in areas.iter().zip(panels) {
        let points = panel.series.iter().flat_map(|(_, s)| s.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x0 > x1 {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        let pad = if y1 > y0 { 0.05 * (y1 - y0) } else { 0.5 };
        let mut chart = ChartBuilder::on(area)
            .caption(&panel.title, ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
            .map_err(|e| err(&e))?;
        chart.configure_mesh().draw().map_err(|e| err(&e))?;
        for (k, (name, data)) in panel.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            chart
                .draw_series(LineSeries::new(
                    data.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()),
                    color.stroke_width(2),
                ))
                .map_err(|e| err(&e))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Rows of one episode of one run. Without an explicit episode the last
/// episode in the log is used.
fn episode_rows<'a>(rows: &'a [LogRow], run: &str, episode: Option<usize>) -> Result<Vec<&'a LogRow>, PlotError> {
    let in_run = rows.iter().filter(|r| r.run == run);
    let episode = match episode {
        Some(e) => e,
        None => in_run
            .clone()
            .map(|r| r.episode)
            .max()
            .ok_or_else(|| PlotError::NoData(format!("run `{run}`")))?,
    };
    let out: Vec<&LogRow> = in_run.filter(|r| r.episode == episode).collect();
    if out.is_empty() {
        return Err(PlotError::NoData(format!("run `{run}`, episode {episode}")));
    }
    Ok(out)
}

fn series(name: &str, rows: &[&LogRow], f: impl Fn(&LogRow) -> f64) -> Series {
    (name.to_string(), rows.iter().map(|r| (r.step as f64, f(r))).collect())
}

fn first_run(rows: &[LogRow]) -> Result<String, PlotError> {
    rows.first()
        .map(|r| r.run.clone())
        .ok_or_else(|| PlotError::NoData("an empty log".into()))
}

/// Renders `kind` from `rows` into an SVG file at `path`. `episode` selects
/// the episode for per-episode charts; `run` defaults to the first run in the log.
pub fn render(
    kind: PlotKind,
    rows: &[LogRow],
    run: Option<&str>,
    episode: Option<usize>,
    path: &Path,
) -> Result<(), PlotError> {
    match kind {
        PlotKind::Prices => {
            let run = run.map_or_else(|| first_run(rows), |r| Ok(r.to_string()))?;
            let ep = episode_rows(rows, &run, episode)?;
            let title = format!("Prices and collateral factors, {run} episode {}", ep[0].episode);
            draw(
                path,
                &title,
                &[
                    Panel {
                        title: "Price (WETH)".into(),
                        series: vec![
                            series("WETH", &ep, |r| r.price_weth),
                            series("USDC", &ep, |r| r.price_usdc),
                            series("TKN", &ep, |r| r.price_tkn),
                        ],
                    },
                    Panel {
                        title: "Collateral factor".into(),
                        series: vec![
                            series("WETH", &ep, |r| r.cf_weth),
                            series("USDC", &ep, |r| r.cf_usdc),
                            series("TKN", &ep, |r| r.cf_tkn),
                        ],
                    },
                ],
            )
        }
        PlotKind::Pool => {
            let run = run.map_or_else(|| first_run(rows), |r| Ok(r.to_string()))?;
            let ep = episode_rows(rows, &run, episode)?;
            let title = format!("Pool state, {run} episode {}", ep[0].episode);
            draw(
                path,
                &title,
                &[
                    Panel {
                        title: "Utilization".into(),
                        series: vec![
                            series("WETH", &ep, |r| r.util_weth),
                            series("USDC", &ep, |r| r.util_usdc),
                            series("TKN", &ep, |r| r.util_tkn),
                        ],
                    },
                    Panel {
                        title: "Net position (WETH)".into(),
                        series: vec![
                            series("WETH", &ep, |r| r.net_weth),
                            series("USDC", &ep, |r| r.net_usdc),
                            series("TKN", &ep, |r| r.net_tkn),
                        ],
                    },
                ],
            )
        }
        PlotKind::Training => {
            let run = run.unwrap_or("train");
            let mut per_episode: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.run == run) {
                let e = per_episode.entry(r.episode).or_insert((f64::NAN, 0.0, 0.0, 0));
                if let Some(eps) = r.epsilon {
                    e.0 = eps;
                }
                e.1 += r.reward;
                if let Some(l) = r.loss {
                    e.2 += l;
                    e.3 += 1;
                }
            }
            if per_episode.is_empty() {
                return Err(PlotError::NoData(format!("run `{run}`")));
            }
            let pts = |f: &dyn Fn(&(f64, f64, f64, usize)) -> f64| -> Vec<(f64, f64)> {
                per_episode.iter().map(|(&k, v)| (k as f64, f(v))).collect()
            };
            draw(
                path,
                "Training progress",
                &[
                    Panel {
                        title: "Epsilon".into(),
                        series: vec![("epsilon".into(), pts(&|v| v.0))],
                    },
                    Panel {
                        title: "Episode score (WETH)".into(),
                        series: vec![("score".into(), pts(&|v| v.1))],
                    },
                    Panel {
                        title: "Mean loss".into(),
                        series: vec![(
                            "loss".into(),
                            pts(&|v| if v.3 == 0 { f64::NAN } else { v.2 / v.3 as f64 }),
                        )],
                    },
                ],
            )
        }
        PlotKind::NetPos => {
            let agent = episode_rows(rows, "agent", episode)?;
            let bench = episode_rows(rows, "benchmark", Some(agent[0].episode))?;
            let title = format!("Total net position, seed {}", agent[0].seed);
            draw(
                path,
                &title,
                &[Panel {
                    title: "Net position (WETH)".into(),
                    series: vec![
                        series("agent", &agent, |r| r.net_total),
                        series("benchmark (CF 0.8)", &bench, |r| r.net_total),
                    ],
                }],
            )
        }
    }
}
