use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use m2n2::segmenter::Method;
use m2n2_server::cli::{
    export_diagnostics, open_session, parse_clicks, parse_weights, segment_clicks,
};
use m2n2_server::{router, spawn_reaper, AppState, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "m2n2",
    about = "Interactive segmentation from diffusion attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Idle seconds before a session is dropped.
        #[arg(long, default_value_t = 1800)]
        ttl_secs: u64,
        #[arg(long, default_value_t = 256)]
        max_body_mb: usize,
    },
    /// Segment one image from a list of clicks and write the mask as PNG.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        attn: PathBuf,
        /// Clicks as "x,y,fg;x,y,bg".
        #[arg(long)]
        clicks: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "m2n2")]
        method: Method,
        /// Aggregation weights as "id=w,id=w".
        #[arg(long)]
        weights: Option<String>,
    },
    /// Write chain snapshots, maps, score curves and segment previews.
    ExportDiagnostics {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        attn: PathBuf,
        #[arg(long)]
        clicks: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Chain steps to snapshot.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        steps: Vec<usize>,
        #[arg(long)]
        weights: Option<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve {
            host,
            port,
            ttl_secs,
            max_body_mb,
        } => serve(host, port, ttl_secs, max_body_mb),
        Command::Segment {
            image,
            attn,
            clicks,
            out,
            method,
            weights,
        } => {
            let weights = weights.as_deref().map(parse_weights).transpose()?;
            let clicks = parse_clicks(&clicks)?;
            let mut ctx = open_session(&image, &attn, weights.as_ref(), method)?;
            let mask = segment_clicks(&mut ctx, &clicks)?;
            mask.to_image()
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            info!(
                "{} foreground pixels written to {}",
                mask.count(),
                out.display()
            );
            Ok(())
        }
        Command::ExportDiagnostics {
            image,
            attn,
            clicks,
            out_dir,
            steps,
            weights,
        } => {
            let weights = weights.as_deref().map(parse_weights).transpose()?;
            let clicks = parse_clicks(&clicks)?;
            let mut ctx = open_session(&image, &attn, weights.as_ref(), Method::M2n2)?;
            let files = export_diagnostics(&mut ctx, &clicks, &steps, &out_dir)?;
            info!("wrote {} files to {}", files.len(), out_dir.display());
            Ok(())
        }
    }
}

fn serve(host: String, port: u16, ttl_secs: u64, max_body_mb: usize) -> Result<()> {
    let config = ServiceConfig {
        session_ttl: Duration::from_secs(ttl_secs),
        max_body_bytes: max_body_mb << 20,
        ..ServiceConfig::default()
    };
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .context("bad listen address")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let state = AppState::new(config);
        let reaper = spawn_reaper(state.clone());
        let listener = tokio::net::TcpListener::bind(addr).await?;
        info!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        reaper.abort();
        Ok(())
    })
}
