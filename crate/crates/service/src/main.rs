use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use cellvista_core::spatial::CombineMode;
use cellvista_core::stats::{category_mask, differential_expression, MarkerTable};
use cellvista_core::store::{Catalog, Store};
use cellvista_discover::config::API_BASE_ENV;
use cellvista_discover::{DiscoverClient, DiscoverConfig};
use cellvista_service::pipeline;
use cellvista_service::server::CACHE_DIR;
use cellvista_service::session::{Dataset, Geometry, SelectionSpec, SessionState};
use cellvista_service::{ServeConfig, Server, DEFAULT_PORT};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellvista", version, about = "Single-cell dataset exploration backend")]
struct Cli {
    /// Directory holding the catalog, raw downloads and stores.
    #[arg(long, env = "CELLVISTA_DATA_DIR", default_value = "cellvista-data", global = true)]
    data_dir: PathBuf,
    /// Base URL of the Discover API.
    #[arg(long, env = API_BASE_ENV, global = true)]
    api_base: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List remote collections, or local datasets with --local.
    Catalog {
        #[arg(long)]
        filter: Option<String>,
        /// Ignore the cached listing.
        #[arg(long)]
        refresh: bool,
        #[arg(long)]
        local: bool,
    },
    /// Download a dataset's h5ad into the data directory.
    Download { dataset_id: String },
    /// Build the store for a dataset. With --file, registers a local h5ad
    /// under the given id first.
    Ingest {
        dataset_id: String,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
    /// Compute marker genes for every annotation category.
    Precompute {
        dataset_id: String,
        /// Also write the marker tables as TSV.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Export stored marker tables as TSV.
    Markers {
        dataset_id: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rank genes differentially expressed in a selection against the rest.
    De(DeArgs),
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "CELLVISTA_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "CELLVISTA_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Built viewer bundle to serve at /.
        #[arg(long, env = "CELLVISTA_STATIC_DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "selection")]
struct Selection {
    /// Comma-separated cell indices and ranges, e.g. 0-29,40.
    #[arg(long)]
    cells: Option<String>,
    /// ANNOTATION=CATEGORY
    #[arg(long)]
    category: Option<String>,
    /// x,y,z,radius in embedding coordinates.
    #[arg(long)]
    sphere: Option<String>,
}

#[derive(Args)]
struct DeArgs {
    dataset_id: String,
    #[command(flatten)]
    selection: Selection,
    /// Embedding for --sphere; defaults to the dataset's default.
    #[arg(long)]
    embedding: Option<String>,
    #[arg(long)]
    json: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let discover_config = || {
        let cfg = DiscoverConfig::from_env(cli.data_dir.join(CACHE_DIR));
        match &cli.api_base {
            Some(b) => cfg.with_base_url(b),
            None => cfg,
        }
    };

    match &cli.command {
        Command::Catalog {
            filter,
            refresh,
            local,
        } => {
            if *local {
                print_local(&cli.data_dir)
            } else {
                runtime()?.block_on(catalog(discover_config(), filter.as_deref(), *refresh))
            }
        }
        Command::Download { dataset_id } => {
            std::fs::create_dir_all(&cli.data_dir)
                .with_context(|| format!("creating {}", cli.data_dir.display()))?;
            runtime()?.block_on(download(discover_config(), &cli.data_dir, dataset_id))
        }
        Command::Ingest {
            dataset_id,
            file,
            title,
        } => {
            if let Some(f) = file {
                std::fs::create_dir_all(&cli.data_dir)
                    .with_context(|| format!("creating {}", cli.data_dir.display()))?;
                let title = title.clone().unwrap_or_else(|| dataset_id.clone());
                pipeline::register_local(&cli.data_dir, dataset_id, &title, f)?;
            }
            let e = pipeline::ingest(&cli.data_dir, dataset_id, &|_| {})?;
            println!(
                "{}\t{}",
                e.dataset_id,
                e.store_path.as_deref().unwrap_or(Path::new("")).display()
            );
            Ok(())
        }
        Command::Precompute { dataset_id, tsv } => {
            let markers = pipeline::precompute(&cli.data_dir, dataset_id, &|_| {})?;
            for a in &markers.annotations {
                println!("{}\t{} categories", a.annotation, a.categories.len());
            }
            if let Some(path) = tsv {
                std::fs::write(path, markers.to_tsv())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Markers { dataset_id, output } => {
            let store = Store::open(pipeline::processed_store_path(&cli.data_dir, dataset_id)?)?;
            let markers = store
                .markers()
                .ok_or_else(|| anyhow!("markers for {dataset_id} have not been precomputed"))?;
            match output {
                Some(p) => std::fs::write(p, markers.to_tsv())
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", markers.to_tsv()),
            }
            Ok(())
        }
        Command::De(args) => de(&cli.data_dir, args),
        Command::Serve {
            host,
            port,
            static_dir,
        } => {
            std::fs::create_dir_all(&cli.data_dir)
                .with_context(|| format!("creating {}", cli.data_dir.display()))?;
            let config = ServeConfig {
                host: host.clone(),
                port: *port,
                data_dir: cli.data_dir.clone(),
                discover: discover_config(),
                static_dir: static_dir.clone(),
            };
            runtime()?.block_on(async {
                let server = Server::bind(config).await?;
                tracing::info!("listening on http://{}", server.local_addr());
                server.run().await?;
                Ok(())
            })
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Runtime::new()?)
}

fn print_local(data_dir: &Path) -> Result<()> {
    let catalog = Catalog::open(data_dir)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "dataset_id\tstate\tsource\ttitle")?;
    for e in catalog.entries() {
        writeln!(out, "{}\t{}\t{}\t{}", e.dataset_id, e.state(), e.source, e.title)?;
    }
    Ok(())
}

async fn catalog(config: DiscoverConfig, filter: Option<&str>, refresh: bool) -> Result<()> {
    let client = DiscoverClient::new(config)?;
    let listing = if refresh {
        client.refresh_collections(filter).await?
    } else {
        client.list_collections(filter).await?
    };
    if listing.stale {
        eprintln!("warning: upstream unreachable, showing cached listing");
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "collection\tdataset_id\tdownloadable\tsize_bytes\ttitle")?;
    for c in &listing.collections {
        for d in &c.datasets {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                c.name,
                d.dataset_id,
                d.is_downloadable(),
                d.asset_size_bytes.map(|s| s.to_string()).unwrap_or_default(),
                d.title
            )?;
        }
    }
    Ok(())
}

async fn download(config: DiscoverConfig, data_dir: &Path, dataset_id: &str) -> Result<()> {
    let client = DiscoverClient::new(config)?;
    let ds = client.find_dataset(dataset_id).await?;
    let last = std::sync::atomic::AtomicU64::new(0);
    let entry = client
        .download_into_catalog(&ds, data_dir, |done, total| {
            // report roughly every 5%
            if let Some(t) = total.filter(|&t| t > 0) {
                let pct = done * 100 / t;
                if pct >= last.load(std::sync::atomic::Ordering::Relaxed) + 5 || done == t {
                    last.store(pct, std::sync::atomic::Ordering::Relaxed);
                    eprintln!("{dataset_id}: {pct}%");
                }
            }
        })
        .await?;
    println!(
        "{}\t{}",
        entry.dataset_id,
        entry.raw_path.as_deref().unwrap_or(Path::new("")).display()
    );
    Ok(())
}

fn parse_cells(spec: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    bail!("empty range {part}");
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse()?),
        }
    }
    Ok(out)
}

fn parse_sphere(spec: &str) -> Result<([f64; 3], f64)> {
    let v = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .context("sphere must be x,y,z,radius")?;
    match v[..] {
        [x, y, z, r] => Ok(([x, y, z], r)),
        _ => bail!("sphere must be x,y,z,radius"),
    }
}

fn de(data_dir: &Path, args: &DeArgs) -> Result<()> {
    let store = Store::open(pipeline::processed_store_path(data_dir, &args.dataset_id)?)?;
    let d = Arc::new(Dataset::new(&args.dataset_id, store));
    let (mask, label) = if let Some(cat) = &args.selection.category {
        let (ann, category) = cat
            .split_once('=')
            .ok_or_else(|| anyhow!("--category takes ANNOTATION=CATEGORY"))?;
        let a = d
            .store
            .annotation(ann)
            .ok_or_else(|| anyhow!("no annotation named {ann}"))?;
        let k = a
            .categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| anyhow!("annotation {ann} has no category {category}"))?;
        (category_mask(a, k as u32), category.to_string())
    } else {
        let geometry = if let Some(c) = &args.selection.cells {
            Geometry::Cells {
                cells: parse_cells(c)?,
            }
        } else {
            let (center, radius) = parse_sphere(args.selection.sphere.as_deref().unwrap_or(""))?;
            Geometry::Sphere { center, radius }
        };
        let embedding = args
            .embedding
            .clone()
            .or_else(|| d.store.default_embedding().map(|e| e.name.clone()))
            .unwrap_or_default();
        let mut session = SessionState::new(String::new(), d.clone(), embedding);
        session
            .apply(&SelectionSpec {
                mode: CombineMode::Replace,
                geometry: Some(geometry),
            })
            .map_err(|e| anyhow!(e.message))?;
        (session.selection, "selection".to_string())
    };
    let table = differential_expression(&d.store, &mask, &label)?;
    print_table(&table, mask.len(), args.json)
}

fn print_table(table: &MarkerTable, selected: usize, json: bool) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(
            &mut out,
            &serde_json::json!({"selection_size": selected, "table": table}),
        )?;
        writeln!(out)?;
        return Ok(());
    }
    eprintln!("{selected} cells selected");
    writeln!(out, "rank\tgene_index\tgene\tt\tdf\tp_value\tlog2_fc")?;
    for (i, r) in table.records.iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:e}\t{}",
            i + 1,
            r.gene_index,
            r.gene_name,
            r.t,
            r.df,
            r.p_value,
            r.log_fold_change
        )?;
    }
    Ok(())
}
