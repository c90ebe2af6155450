use std::fs;
use std::path::Path;

use crate::baselines::FtConfig;
use crate::data::RenderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::meta::{BaseTrainConfig, LabelmapSource, MetaConfig, Order};
use crate::model::ModelConfig;

/// Every tunable the commands share, with one geometry driving both the
/// renderer and the model.
#[derive(Clone, Debug)]
pub struct Settings {
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub base: BaseTrainConfig,
    pub ft: FtConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
    /// `gen-data`: rendered samples per category.
    pub gen_samples: usize,
    /// `similarity`: episodes per unseen category.
    pub similarity_episodes: usize,
}

impl Settings {
    pub fn standard() -> Settings {
        Settings {
            model: ModelConfig::standard(),
            meta: MetaConfig::standard(),
            base: BaseTrainConfig::standard(),
            ft: FtConfig::standard(),
            eval: EvalConfig::standard(),
            render: RenderConfig::standard(),
            gen_samples: 3,
            similarity_episodes: 50,
        }
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Settings::parse(&text)
    }

    /// Line-oriented `key = value` text; `#` starts a comment, blank lines
    /// are skipped.
    pub fn parse(text: &str) -> Result<Settings> {
        let mut settings = Settings::standard();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("config line {}: expected key = value", i + 1))
            })?;
            settings
                .apply(key.trim(), value.trim())
                .map_err(|e| Error::usage(format!("config line {}: {e}", i + 1)))?;
        }
        settings.validate()?;
        Ok(settings)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::usage(format!("bad {what} value {value:?}"));
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(key))?
            };
        }
        match key {
            "image_h" => {
                let v = num!(usize);
                self.set_geometry(|g| g.image_h = v);
            }
            "image_w" => {
                let v = num!(usize);
                self.set_geometry(|g| g.image_w = v);
            }
            "feat_h" => {
                let v = num!(usize);
                self.set_geometry(|g| g.feat_h = v);
            }
            "feat_w" => {
                let v = num!(usize);
                self.set_geometry(|g| g.feat_w = v);
            }
            "feat_dim" => self.model.feat_dim = num!(usize),
            "predictor_hidden" => self.model.predictor_hidden = num!(usize),
            "conv_channels" => self.model.conv_channels = parse_usize_list(value)?,

            "inner_lr" => self.meta.inner_lr = num!(f64),
            "outer_lr" => self.meta.outer_lr = num!(f64),
            "predictor_lr" => self.meta.predictor_lr = num!(f64),
            "inner_steps" => self.meta.inner_steps = num!(usize),
            "n_tasks" => self.meta.n_tasks = num!(usize),
            "order" => self.meta.order = Order::parse(value)?,
            "labelmap_source_train" => {
                self.meta.labelmap_source_train = LabelmapSource::parse(value)?
            }
            "train_shots" => self.meta.train_shots = parse_usize_list(value)?,
            "train_query" => self.meta.train_query = num!(usize),

            "base_steps" => self.base.steps = num!(usize),
            "base_lr" => self.base.lr = num!(f64),
            "base_batch" => self.base.batch = num!(usize),
            "base_loss_threshold" => self.base.loss_threshold = num!(f64),

            "ft_steps" => self.ft.steps = num!(usize),
            "ft_lr" => self.ft.lr = num!(f64),

            "episodes_per_category" => self.eval.episodes_per_category = num!(usize),
            "query_size" => self.eval.query_size = num!(usize),
            "shots" => self.eval.shots = parse_usize_list(value)?,

            "max_rot_deg" => self.render.max_rot_deg = num!(f64),
            "scale_lo" => self.render.scale_lo = num!(f64),
            "scale_hi" => self.render.scale_hi = num!(f64),
            "max_translate" => self.render.max_translate = num!(f64),
            "max_thickness" => self.render.max_thickness = num!(usize),
            "blur" => self.render.blur = value.parse::<bool>().map_err(|_| bad(key))?,
            "noise_sigma" => self.render.noise_sigma = num!(f64),
            "max_retries" => self.render.max_retries = num!(usize),

            "gen_samples" => self.gen_samples = num!(usize),
            "similarity_episodes" => self.similarity_episodes = num!(usize),

            other => return Err(Error::usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn set_geometry(&mut self, update: impl FnOnce(&mut crate::data::Geometry)) {
        update(&mut self.model.geom);
        self.render.geom = self.model.geom;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.meta.validate()?;
        self.base.validate()?;
        self.eval.validate()?;
        if self.render.geom != self.model.geom {
            return Err(Error::usage("render and model geometry diverged"));
        }
        Ok(())
    }
}

pub fn parse_usize_list(value: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::usage(format!("bad list entry {:?}", part.trim())))
        })
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::usage("empty list value"));
    }
    Ok(items)
}
