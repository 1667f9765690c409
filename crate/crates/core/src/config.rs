//! Run configuration in flat `key = value` form.
//!
//! Blank lines and lines starting with `#` are skipped. Every key may appear
//! at most once, unknown keys are rejected, and values are range-checked after
//! all lines (and `--set` overrides) have been applied.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::afr::AfrConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussianKernel;
use crate::segnet::NetConfig;
use crate::synthdata::{DomainShift, SceneSpec};

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
numeric_value!(u64, usize, f64);

impl Value for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $t:ty = $default:expr, )*) => {
        /// Every tunable of a training run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $t, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name), )*];

            fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($name) => self.$name = <$t as Value>::parse_value(value)?, )*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.show()), )*]
            }
        }
    };
}

run_config! {
    /// Seeds parameter init and the training stream.
    seed: u64 = 0,
    /// Seeds scene content; shared by all runs that should see the same data.
    data_seed: u64 = 0,
    iterations: u64 = 2000,
    batch_size: usize = 2,
    lr: f64 = 0.01,
    momentum: f64 = 0.9,
    alpha_ema: f64 = 0.999,
    /// Use min(1 - 1/(t+1), alpha_ema) at step t, so the teacher starts as a
    /// plain average of the student history instead of the random init.
    ema_warmup: bool = true,
    tau: f64 = 0.968,
    mask_patch: usize = 8,
    mask_ratio: f64 = 0.7,
    lambda_mask: f64 = 1.0,
    /// Gaussian sigma of the high-frequency residual.
    gamma: f64 = 1.0,
    kernel_size: usize = 3,
    enable_afr: bool = true,
    enable_cala: bool = true,
    enable_uhfa: bool = true,
    enable_hf_cala: bool = true,
    enable_hf_uhfa: bool = true,
    detach_uncertainty: bool = false,
    unweighted_mix: bool = false,
    enable_target_loss: bool = true,
    enable_masked_loss: bool = true,
    num_classes: usize = 4,
    lr_width: usize = 16,
    hr_width: usize = 16,
    hr_levels: usize = 1,
    height: usize = 32,
    width: usize = 32,
    min_shapes: usize = 1,
    max_shapes: usize = 4,
    hue_offset: f64 = 0.15,
    brightness: f64 = 0.8,
    noise_sigma: f64 = 0.05,
    stripe_amplitude: f64 = 0.05,
    /// 0 disables periodic evaluation; the final iteration is always evaluated.
    eval_interval: u64 = 500,
    eval_images: usize = 64,
    /// 0 writes only the final checkpoint.
    checkpoint_interval: u64 = 0,
    /// 0 disables attention dumps.
    dump_interval: u64 = 0,
    /// Images averaged for the mask fill colour.
    mean_images: usize = 64,
    out_dir: PathBuf = PathBuf::from("runs/default"),
}

fn check(ok: bool, key: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config {
            line: None,
            detail: format!("{key}: {}", msg()),
        })
    }
}

impl RunConfig {
    /// Parse a config file body. Keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| Error::Config { line: Some(i + 1), detail };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            config.set_raw(key, value).map_err(|e| err(format!("{key}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides in order, then re-validate.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o.split_once('=').ok_or_else(|| Error::Config {
                line: None,
                detail: format!("override {o:?} is not key=value"),
            })?;
            self.set_raw(key.trim(), value.trim()).map_err(|detail| Error::Config { line: None, detail })?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        check(self.batch_size >= 1, "batch_size", || "must be at least 1".into())?;
        check(self.lr.is_finite() && self.lr > 0.0, "lr", || format!("must be positive, got {}", self.lr))?;
        check((0.0..1.0).contains(&self.momentum), "momentum", || format!("must be in [0, 1), got {}", self.momentum))?;
        check(unit(self.alpha_ema), "alpha_ema", || format!("must be in [0, 1], got {}", self.alpha_ema))?;
        check(
            self.tau > 1.0 / self.num_classes as f64 && self.tau < 1.0,
            "tau",
            || format!("must be in (1/C, 1), got {}", self.tau),
        )?;
        check(
            self.mask_patch >= 1 && self.height.is_multiple_of(self.mask_patch) && self.width.is_multiple_of(self.mask_patch),
            "mask_patch",
            || format!("{} must divide the image size", self.mask_patch),
        )?;
        check(unit(self.mask_ratio), "mask_ratio", || format!("must be in [0, 1], got {}", self.mask_ratio))?;
        check(
            self.lambda_mask.is_finite() && self.lambda_mask >= 0.0,
            "lambda_mask",
            || format!("must be non-negative, got {}", self.lambda_mask),
        )?;
        check(self.gamma.is_finite() && self.gamma > 0.0, "gamma", || format!("must be positive, got {}", self.gamma))?;
        check(self.kernel_size % 2 == 1, "kernel_size", || format!("must be odd, got {}", self.kernel_size))?;
        check(
            (1..=256).contains(&self.lr_width) && (1..=256).contains(&self.hr_width),
            "lr_width/hr_width",
            || "must be in 1..=256".into(),
        )?;
        check((1..=2).contains(&self.hr_levels), "hr_levels", || "must be 1 or 2".into())?;
        check(
            self.height.is_multiple_of(4) && self.width.is_multiple_of(4) && self.height <= 1024 && self.width <= 1024,
            "height/width",
            || format!("{}×{} must be multiples of 4 up to 1024", self.height, self.width),
        )?;
        check(
            self.hue_offset.is_finite()
                && self.brightness.is_finite()
                && self.brightness >= 0.0
                && self.noise_sigma.is_finite()
                && self.noise_sigma >= 0.0
                && self.stripe_amplitude.is_finite()
                && self.stripe_amplitude >= 0.0,
            "domain shift",
            || "hue must be finite; brightness, noise and stripes non-negative".into(),
        )?;
        check(self.eval_images >= 1, "eval_images", || "must be at least 1".into())?;
        check(self.mean_images >= 1, "mean_images", || "must be at least 1".into())?;
        check(!self.out_dir.as_os_str().is_empty(), "out_dir", || "must not be empty".into())?;
        self.scene_spec().validate().map_err(|e| Error::Config {
            line: None,
            detail: e.to_string(),
        })?;
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            seed: self.data_seed,
        }
    }

    pub fn domain_shift(&self) -> DomainShift {
        DomainShift {
            hue_offset: self.hue_offset,
            brightness: self.brightness,
            noise_sigma: self.noise_sigma,
            stripe_amplitude: self.stripe_amplitude,
        }
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        Ok(NetConfig {
            num_classes: self.num_classes,
            lr_width: self.lr_width,
            hr_width: self.hr_width,
            hr_levels: self.hr_levels,
            afr: AfrConfig {
                enable_afr: self.enable_afr,
                enable_cala: self.enable_cala,
                enable_uhfa: self.enable_uhfa,
                enable_hf_cala: self.enable_hf_cala,
                enable_hf_uhfa: self.enable_hf_uhfa,
                detach_uncertainty: self.detach_uncertainty,
                kernel: GaussianKernel::new(self.gamma, self.kernel_size)?,
            },
        })
    }
}
