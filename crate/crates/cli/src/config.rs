//! Run configuration: built-in defaults, then the shipped preset for the
//! dataset, then a `key = value` file, then command-line flags. Later layers
//! win.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

/// How initial entity and relation embeddings are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Random,
    /// Random rows refined by TransE.
    Transe,
    /// An embedding file written by `pretrain` or `write_embeddings`.
    Pretrained(PathBuf),
    /// Entity rows averaged from the word vectors in the given file.
    Synset(PathBuf),
}

impl std::str::FromStr for Init {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "transe" => Ok(Init::Transe),
            _ => match s.split_once(':') {
                Some(("pretrained", p)) if !p.is_empty() => Ok(Init::Pretrained(p.into())),
                Some(("synset", p)) if !p.is_empty() => Ok(Init::Synset(p.into())),
                _ => bail!("unknown init `{s}` (random, transe, pretrained:<path>, synset:<path>)"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub k: usize,
    pub n_filters: usize,
    pub d: usize,
    pub m: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Worker threads for evaluation; 0 means one per core.
    pub threads: usize,
    pub init: Init,
    pub checkpoint: Option<PathBuf>,
    /// Routing iteration counts compared by `routing-study`.
    pub grid: Vec<usize>,
    pub margin: f64,
    pub transe_lr: f64,
    pub transe_epochs: usize,
    pub delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: PathBuf::from("capse-out"),
            k: 100,
            n_filters: 50,
            d: 10,
            m: 1,
            lr: 1e-4,
            batch: 128,
            epochs: 50,
            eval_every: 10,
            seed: 0,
            threads: 0,
            init: Init::Random,
            checkpoint: None,
            grid: vec![1, 3, 5, 7],
            margin: 5.0,
            transe_lr: 5e-3,
            transe_epochs: 3000,
            delta: 0.8,
        }
    }
}

/// Shipped presets, keyed by dataset name.
const PRESETS: [(&str, &str); 3] = [
    ("WN18RR", include_str!("../defaults/WN18RR.conf")),
    ("FB15k-237", include_str!("../defaults/FB15k-237.conf")),
    ("SEARCH17", include_str!("../defaults/SEARCH17.conf")),
];

pub const SEARCH_PRESET: &str = "SEARCH17";

/// Preset whose name matches the final component of `dataset`, ignoring case.
pub fn preset_for(dataset: &Path) -> Option<&'static str> {
    let name = dataset.file_name()?.to_str()?;
    PRESETS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(n, _)| *n)
}

fn preset_text(name: &str) -> &'static str {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .expect("preset names are fixed")
}

/// `key = value` pairs of a config text; blank lines and `#` comments are
/// skipped.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{source}:{}: expected `key = value`", i + 1))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("invalid value `{value}` for `{key}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(value.into()),
            "out" => self.out = value.into(),
            "k" => self.k = parse(key, value)?,
            "n_filters" => self.n_filters = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "init" => self.init = value.parse()?,
            "checkpoint" => self.checkpoint = Some(value.into()),
            "grid" => {
                self.grid = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "margin" => self.margin = parse(key, value)?,
            "transe_lr" => self.transe_lr = parse(key, value)?,
            "transe_epochs" => self.transe_epochs = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    fn apply(&mut self, pairs: &[(String, String)], source: &str) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value)
                .with_context(|| format!("in {source}"))?;
        }
        Ok(())
    }

    /// Layers the configuration. `preset` forces a preset; otherwise one is
    /// chosen from the dataset directory name, if any matches.
    pub fn resolve(
        file: Option<&Path>,
        flags: &[(String, String)],
        preset: Option<&str>,
    ) -> Result<Self> {
        let file_pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                parse_pairs(&text, &path.display().to_string())?
            }
            None => Vec::new(),
        };
        let dataset = flags
            .iter()
            .rev()
            .chain(file_pairs.iter().rev())
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| PathBuf::from(v));
        let preset = preset.or_else(|| dataset.as_deref().and_then(preset_for));

        let mut config = RunConfig::default();
        if let Some(name) = preset {
            log::info!("using {name} defaults");
            config.apply(&parse_pairs(preset_text(name), name)?, name)?;
        }
        config.apply(&file_pairs, "config file")?;
        config.apply(flags, "command line")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("n_filters", self.n_filters),
            ("d", self.d),
            ("m", self.m),
            ("batch", self.batch),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!("`{name}` must be at least 1");
            }
        }
        if !(self.lr > 0.0) || !(self.transe_lr > 0.0) || !(self.margin > 0.0) {
            bail!("`lr`, `transe_lr` and `margin` must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bail!("`delta` must lie strictly between 0 and 1");
        }
        if self.grid.is_empty() || self.grid.contains(&0) {
            bail!("`grid` needs at least one positive iteration count");
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| anyhow!("no dataset given (use --dataset or `dataset =` in the config)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            let c = RunConfig::resolve(None, &[], Some(name)).unwrap();
            assert_eq!(c.m, 1);
        }
        let wn = RunConfig::resolve(None, &[], Some("WN18RR")).unwrap();
        assert_eq!((wn.n_filters, wn.lr), (400, 1e-5));
        let fb = RunConfig::resolve(None, &[], Some("FB15k-237")).unwrap();
        assert_eq!((fb.n_filters, fb.lr), (50, 1e-4));
        let se = RunConfig::resolve(None, &[], Some(SEARCH_PRESET)).unwrap();
        assert_eq!((se.n_filters, se.lr, se.epochs), (400, 5e-5, 200));
    }

    #[test]
    fn precedence_is_flag_then_file_then_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(
            &file,
            "dataset = data/wn18rr\nlr = 0.5\nepochs = 7 # short\n",
        )
        .unwrap();
        let c = RunConfig::resolve(Some(&file), &pairs(&[("epochs", "3")]), None).unwrap();
        assert_eq!(c.n_filters, 400, "preset picked from the dataset name");
        assert_eq!(c.lr, 0.5, "file overrides preset");
        assert_eq!(c.epochs, 3, "flag overrides file");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::resolve(None, &pairs(&[("bogus", "1")]), None).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("k", "0")]), None).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("delta", "1")]), None).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("init", "glove")]), None).is_err());
        assert!(parse_pairs("k 3", "x").is_err());
    }

    #[test]
    fn init_forms() {
        assert_eq!("random".parse::<Init>().unwrap(), Init::Random);
        assert_eq!(
            "pretrained:a.emb".parse::<Init>().unwrap(),
            Init::Pretrained("a.emb".into())
        );
        assert_eq!(
            "synset:g.txt".parse::<Init>().unwrap(),
            Init::Synset("g.txt".into())
        );
        assert!("pretrained:".parse::<Init>().is_err());
    }
}
