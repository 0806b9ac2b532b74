//! Flat `key = value` configuration.
//!
//! Every model, matching, training and data field is addressable by its
//! name. Lines may carry `#` comments; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

trait Field: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl Field for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Field for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Field for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Field for bool {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Field for Vec<usize> {
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! choice {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl Field for $name {
            fn parse(s: &str) -> Option<Self> {
                match s {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }
            fn render(&self) -> String {
                self.as_str().to_string()
            }
        }
    };
}

choice!(
    /// Classification output: independent sigmoids, or a softmax scaled by
    /// the actor confidence.
    LabelMode { Multi => "multi", Single => "single" }
);
choice!(
    /// Class term of the matching cost.
    ClassCost { Bce => "bce", NegConfidence => "neg_confidence" }
);
choice!(
    /// How each actor's context map is built from the encoded levels.
    Aggregation { ActorSpecific => "actor_specific", MeanPool => "mean_pool" }
);
choice!(
    /// How the actor feature is combined with its context map.
    Fusion { Sum => "sum", Concat => "concat" }
);
choice!(
    /// Classification branch.
    Classifier { Cdl => "cdl", Baseline => "baseline" }
);

macro_rules! config {
    ($($(#[$m:meta])* $field:ident : $ty:ty = $default:expr),+ $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $($(#[$m])* pub $field: $ty),+
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default),+ }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),+];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as Field>::parse(value).ok_or_else(|| {
                            Error::config(format!("invalid value {value:?} for `{key}`"))
                        })?;
                    })+
                    _ => return Err(Error::config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Every field as `(key, value)` text, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), Field::render(&self.$field))),+]
            }
        }
    };
}

config! {
    // model
    d_model: usize = 64,
    heads: usize = 8,
    /// Number of feature levels L.
    levels: usize = 2,
    /// Sampling points per head and level K.
    points: usize = 4,
    /// Actor candidates N_a.
    actors: usize = 5,
    enc_layers: usize = 2,
    dec_layers: usize = 2,
    classes: usize = 6,
    /// Clip length T.
    clip_len: usize = 4,
    /// Finest feature grid; frames are `grid * patch` pixels.
    grid_h: usize = 16,
    grid_w: usize = 16,
    patch: usize = 4,
    backbone_dim: usize = 32,
    ffn_dim: usize = 128,
    fusion_convs: usize = 2,
    label_mode: LabelMode = LabelMode::Multi,
    cdl_actor_pos: bool = true,
    aggregation: Aggregation = Aggregation::ActorSpecific,
    fusion: Fusion = Fusion::Sum,
    classifier: Classifier = Classifier::Cdl,
    init_scale: f64 = 1.0,
    // matching and loss
    eta_box: f64 = 5.0,
    eta_giou: f64 = 2.0,
    eta_class: f64 = 2.0,
    class_cost: ClassCost = ClassCost::Bce,
    lambda_class: f64 = 10.0,
    lambda_box: f64 = 5.0,
    lambda_giou: f64 = 2.0,
    lambda_conf: f64 = 1.0,
    focal_alpha: f64 = 0.25,
    focal_gamma: f64 = 2.0,
    // optimization
    seed: u64 = 0,
    steps: usize = 1000,
    batch_size: usize = 4,
    lr: f64 = 1e-4,
    warmup_start_lr: f64 = 1e-5,
    warmup_steps: usize = 0,
    milestones: Vec<usize> = Vec::new(),
    lr_decay: f64 = 0.1,
    weight_decay: f64 = 1e-4,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    grad_clip: f64 = 0.1,
    log_every: usize = 10,
    eval_every: usize = 0,
    checkpoint_every: usize = 0,
    // synthetic data
    eval_clips: usize = 64,
    eval_seed: u64 = 1_000_003,
    min_actors: usize = 1,
    max_actors: usize = 2,
    noise: f64 = 0.1,
    cue_size: usize = 4,
}

impl Config {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// The effective configuration in the same format [`parse`](Self::parse)
    /// accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Keys whose values differ between two configurations.
    pub fn diff(&self, other: &Config) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn frame_h(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn frame_w(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("levels", self.levels),
            ("points", self.points),
            ("actors", self.actors),
            ("classes", self.classes),
            ("clip_len", self.clip_len),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("patch", self.patch),
            ("backbone_dim", self.backbone_dim),
            ("ffn_dim", self.ffn_dim),
            ("fusion_convs", self.fusion_convs),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return fail(format!("`{k}` must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 4 != 0 {
            return fail(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        let scale = 1usize << (self.levels - 1);
        if self.grid_h % scale != 0 || self.grid_w % scale != 0 {
            return fail(format!(
                "grid {}x{} cannot be halved {} times",
                self.grid_h,
                self.grid_w,
                self.levels - 1
            ));
        }
        let coefficients = [
            ("eta_box", self.eta_box),
            ("eta_giou", self.eta_giou),
            ("eta_class", self.eta_class),
            ("lambda_class", self.lambda_class),
            ("lambda_box", self.lambda_box),
            ("lambda_giou", self.lambda_giou),
            ("lambda_conf", self.lambda_conf),
            ("focal_gamma", self.focal_gamma),
            ("lr", self.lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("noise", self.noise),
        ];
        for (k, v) in coefficients {
            if v < 0.0 {
                return fail(format!("`{k}` must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return fail("`focal_alpha` must lie in [0, 1]".into());
        }
        if self.min_actors > self.max_actors || self.max_actors > self.actors {
            return fail(format!(
                "need min_actors <= max_actors <= actors, got {} / {} / {}",
                self.min_actors, self.max_actors, self.actors
            ));
        }
        if self.cue_size == 0 || self.cue_size * 3 > self.frame_h().min(self.frame_w()) {
            return fail(format!("cue_size {} does not fit the frame", self.cue_size));
        }
        Ok(())
    }
}
