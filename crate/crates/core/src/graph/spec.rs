use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SpnError};

/// Pair of per-axis values, height first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub h: usize,
    pub w: usize,
}

impl Pair {
    pub const fn new(h: usize, w: usize) -> Self {
        Pair { h, w }
    }

    pub const fn square(v: usize) -> Self {
        Pair { h: v, w: v }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// `(k - 1) * d` padding cells on each side of an axis.
    Full,
    /// No padding; every patch lies inside the input grid.
    None,
    /// Full padding, then only the output cells whose scope spans every
    /// variable are kept. Used for the top product layer of a stack.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelSelection {
    /// One product per channel combination, first `n` combinations in
    /// lexicographic order; `None` takes all `C^t` of them.
    OneHot(Option<usize>),
    /// Output channel `c` multiplies channel `c` of every patch cell (sum pooling).
    Depthwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GclpSpec {
    pub kernel: Pair,
    pub stride: Pair,
    pub dilation: Pair,
    pub padding: Padding,
    pub selection: ChannelSelection,
}

impl GclpSpec {
    pub fn taps(&self) -> usize {
        self.kernel.h * self.kernel.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    GaussianLeaf {
        components: usize,
    },
    IndicatorLeaf {
        arity: usize,
    },
    /// `local` gives every cell its own weights; otherwise they are shared.
    SpatialSum {
        channels: usize,
        local: bool,
    },
    Gclp(GclpSpec),
    ClassSums {
        classes: usize,
    },
    RootSum,
}

impl LayerSpec {
    pub fn is_leaf(&self) -> bool {
        matches!(self, LayerSpec::GaussianLeaf { .. } | LayerSpec::IndicatorLeaf { .. })
    }

    pub fn is_sum(&self) -> bool {
        matches!(
            self,
            LayerSpec::SpatialSum { .. } | LayerSpec::ClassSums { .. } | LayerSpec::RootSum
        )
    }
}

/// Declarative layer stack over an `height x width` grid of variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn num_vars(&self) -> usize {
        self.height * self.width
    }

    pub fn has_class_sums(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::ClassSums { .. }))
    }

    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::ClassSums { classes } => Some(*classes),
            _ => None,
        })
    }

    /// Layer ordering rules: one leaf layer first, one root last, class sums
    /// (if any) right before the root.
    pub fn check_well_formed(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(SpnError::structure(0, "input shape must be at least 1x1"));
        }
        let n = self.layers.len();
        if n < 2 {
            return Err(SpnError::structure(0, "need at least a leaf layer and a root"));
        }
        if !self.layers[0].is_leaf() {
            return Err(SpnError::structure(0, "first layer must be a leaf layer"));
        }
        if self.layers[n - 1] != LayerSpec::RootSum {
            return Err(SpnError::structure(n - 1, "last layer must be the root sum"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::GaussianLeaf { components: 0 } | LayerSpec::IndicatorLeaf { arity: 0 } => {
                    return Err(SpnError::structure(i, "leaf needs at least one channel"));
                }
                l if l.is_leaf() && i != 0 => {
                    return Err(SpnError::structure(i, "only one leaf layer is allowed"));
                }
                LayerSpec::RootSum if i != n - 1 => {
                    return Err(SpnError::structure(i, "only one root sum is allowed"));
                }
                LayerSpec::ClassSums { classes } => {
                    if i != n - 2 {
                        return Err(SpnError::structure(i, "class sums must directly precede the root"));
                    }
                    if classes == 0 {
                        return Err(SpnError::structure(i, "class sums need at least one class"));
                    }
                }
                LayerSpec::SpatialSum { channels: 0, .. } => {
                    return Err(SpnError::structure(i, "spatial sum needs at least one channel"));
                }
                LayerSpec::Gclp(g) => {
                    let all = [
                        g.kernel.h,
                        g.kernel.w,
                        g.stride.h,
                        g.stride.w,
                        g.dilation.h,
                        g.dilation.w,
                    ];
                    if all.contains(&0) {
                        return Err(SpnError::structure(
                            i,
                            "kernel sizes, strides and dilations must be at least 1",
                        ));
                    }
                    if g.selection == ChannelSelection::OneHot(Some(0)) {
                        return Err(SpnError::structure(i, "one-hot selection needs at least one channel"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Structure used for inpainting: all-combination products over the
    /// leaves, then depthwise products with doubling dilations until the
    /// patches span the image, separated by spatial sums.
    pub fn generative(height: usize, width: usize, components: usize, sum_channels: usize) -> Self {
        let mut layers = vec![LayerSpec::GaussianLeaf { components }];
        let extent = height.max(width);
        let mut dilation = 1;
        loop {
            let last = dilation * 2 >= extent;
            let selection = if dilation == 1 {
                ChannelSelection::OneHot(None)
            } else {
                ChannelSelection::Depthwise
            };
            layers.push(LayerSpec::Gclp(GclpSpec {
                kernel: axis_kernel(height, width, 2),
                stride: Pair::square(1),
                dilation: Pair::square(dilation),
                padding: if last { Padding::Final } else { Padding::Full },
                selection,
            }));
            if last {
                break;
            }
            layers.push(LayerSpec::SpatialSum {
                channels: sum_channels,
                local: false,
            });
            dilation *= 2;
        }
        layers.push(LayerSpec::RootSum);
        NetworkSpec { height, width, layers }
    }

    /// The same structure with per-cell weights in every spatial sum layer.
    pub fn with_local_sums(mut self) -> Self {
        for layer in &mut self.layers {
            if let LayerSpec::SpatialSum { local, .. } = layer {
                *local = true;
            }
        }
        self
    }

    /// Classifier structure: `non_overlapping` stride-2 product layers without
    /// padding, then unit-stride products with doubling dilations and full
    /// padding. `sum_channels[i]` sets the width of the i-th spatial sum layer;
    /// the last entry repeats. Each halving must see even extents; otherwise
    /// the unpadded layers drop a row or column and compiling fails.
    pub fn discriminative(
        height: usize,
        width: usize,
        components: usize,
        non_overlapping: usize,
        sum_channels: &[usize],
        classes: usize,
    ) -> Self {
        assert!(!sum_channels.is_empty());
        let mut layers = vec![LayerSpec::GaussianLeaf { components }];
        let mut sums = 0usize;
        let mut push_sum = |layers: &mut Vec<LayerSpec>| {
            let c = sum_channels[sums.min(sum_channels.len() - 1)];
            sums += 1;
            layers.push(LayerSpec::SpatialSum {
                channels: c,
                local: false,
            });
        };
        let (mut h, mut w) = (height, width);
        for _ in 0..non_overlapping {
            layers.push(LayerSpec::Gclp(GclpSpec {
                kernel: axis_kernel(h, w, 2),
                stride: Pair::new(if h > 1 { 2 } else { 1 }, if w > 1 { 2 } else { 1 }),
                dilation: Pair::square(1),
                padding: Padding::None,
                selection: ChannelSelection::Depthwise,
            }));
            push_sum(&mut layers);
            h = if h > 1 { (h - 2) / 2 + 1 } else { 1 };
            w = if w > 1 { (w - 2) / 2 + 1 } else { 1 };
        }
        let extent = h.max(w);
        let mut dilation = 1;
        loop {
            let last = dilation * 2 >= extent;
            layers.push(LayerSpec::Gclp(GclpSpec {
                kernel: axis_kernel(h, w, 2),
                stride: Pair::square(1),
                dilation: Pair::square(dilation),
                padding: if last { Padding::Final } else { Padding::Full },
                selection: ChannelSelection::Depthwise,
            }));
            if last {
                break;
            }
            push_sum(&mut layers);
            dilation *= 2;
        }
        layers.push(LayerSpec::ClassSums { classes });
        layers.push(LayerSpec::RootSum);
        NetworkSpec { height, width, layers }
    }
}

// Size-1 axes get a kernel of 1 so 1-D grids work with the same builders.
fn axis_kernel(h: usize, w: usize, k: usize) -> Pair {
    Pair::new(if h > 1 { k } else { 1 }, if w > 1 { k } else { 1 })
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}x{}", self.height, self.width)?;
        for layer in &self.layers {
            match layer {
                LayerSpec::GaussianLeaf { components } => writeln!(f, "gaussian_leaf k={components}")?,
                LayerSpec::IndicatorLeaf { arity } => writeln!(f, "indicator_leaf arity={arity}")?,
                LayerSpec::SpatialSum { channels, local } => writeln!(
                    f,
                    "spatial_sum channels={channels}{}",
                    if *local { " weights=local" } else { "" }
                )?,
                LayerSpec::Gclp(g) => {
                    let pad = match g.padding {
                        Padding::Full => "full",
                        Padding::None => "none",
                        Padding::Final => "final",
                    };
                    let channels = match g.selection {
                        ChannelSelection::Depthwise => "depthwise".to_string(),
                        ChannelSelection::OneHot(None) => "onehot:all".to_string(),
                        ChannelSelection::OneHot(Some(n)) => format!("onehot:{n}"),
                    };
                    writeln!(
                        f,
                        "gclp kernel={} stride={} dilation={} pad={} channels={}",
                        g.kernel, g.stride, g.dilation, pad, channels
                    )?
                }
                LayerSpec::ClassSums { classes } => writeln!(f, "class_sums k={classes}")?,
                LayerSpec::RootSum => writeln!(f, "root")?,
            }
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = SpnError;

    fn from_str(text: &str) -> Result<Self> {
        parse_structure(text)
    }
}

/// Parses the line-oriented structure format. `#` starts a comment; the first
/// statement must be `input <H>x<W>`.
pub fn parse_structure(text: &str) -> Result<NetworkSpec> {
    let mut shape: Option<Pair> = None;
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SpnError::Parse { line: line_no, message };
        let mut words = line.split_whitespace();
        let keyword = words.next().unwrap_or_default();
        let args: Vec<&str> = words.collect();

        if keyword == "input" {
            if shape.is_some() || !layers.is_empty() {
                return Err(err("`input` must appear once, before any layer".into()));
            }
            let [dims] = args.as_slice() else {
                return Err(err("expected `input <H>x<W>`".into()));
            };
            shape = Some(parse_pair(dims).map_err(err)?);
            continue;
        }
        if shape.is_none() {
            return Err(err("expected `input <H>x<W>` before the first layer".into()));
        }
        let kv = parse_args(&args).map_err(err)?;
        let layer = match keyword {
            "gaussian_leaf" => LayerSpec::GaussianLeaf {
                components: kv.usize("k").map_err(err)?,
            },
            "indicator_leaf" => LayerSpec::IndicatorLeaf {
                arity: kv.usize("arity").map_err(err)?,
            },
            "spatial_sum" => LayerSpec::SpatialSum {
                channels: kv.usize("channels").map_err(err)?,
                local: match kv.get("weights") {
                    None | Some("shared") => false,
                    Some("local") => true,
                    Some(other) => return Err(err(format!("weights must be shared or local, got `{other}`"))),
                },
            },
            "class_sums" => LayerSpec::ClassSums {
                classes: kv.usize("k").map_err(err)?,
            },
            "root" => LayerSpec::RootSum,
            "gclp" => LayerSpec::Gclp(parse_gclp(&kv).map_err(err)?),
            other => return Err(err(format!("unknown layer kind `{other}`"))),
        };
        kv.reject_unused(keyword).map_err(err)?;
        layers.push(layer);
    }
    let shape = shape.ok_or(SpnError::Parse {
        line: 0,
        message: "missing `input <H>x<W>` line".into(),
    })?;
    let spec = NetworkSpec {
        height: shape.h,
        width: shape.w,
        layers,
    };
    Ok(spec)
}

struct Args<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    used: std::cell::RefCell<Vec<bool>>,
}

impl<'a> Args<'a> {
    fn get(&self, key: &str) -> Option<&'a str> {
        let pos = self.pairs.iter().position(|(k, _)| *k == key)?;
        self.used.borrow_mut()[pos] = true;
        Some(self.pairs[pos].1)
    }

    fn usize(&self, key: &str) -> std::result::Result<usize, String> {
        let v = self.get(key).ok_or_else(|| format!("missing `{key}=`"))?;
        v.parse().map_err(|_| format!("`{key}` expects an integer, got `{v}`"))
    }

    fn reject_unused(&self, keyword: &str) -> std::result::Result<(), String> {
        let used = self.used.borrow();
        match self.pairs.iter().zip(used.iter()).find(|(_, u)| !**u) {
            Some(((k, _), _)) => Err(format!("unknown argument `{k}` for `{keyword}`")),
            None => Ok(()),
        }
    }
}

fn parse_args<'a>(args: &[&'a str]) -> std::result::Result<Args<'a>, String> {
    let mut pairs = Vec::with_capacity(args.len());
    for a in args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{a}`"))?;
        if pairs.iter().any(|(pk, _)| *pk == k) {
            return Err(format!("duplicate argument `{k}`"));
        }
        pairs.push((k, v));
    }
    let used = std::cell::RefCell::new(vec![false; pairs.len()]);
    Ok(Args { pairs, used })
}

fn parse_pair(s: &str) -> std::result::Result<Pair, String> {
    let bad = || format!("expected `<n>` or `<h>x<w>`, got `{s}`");
    match s.split_once('x') {
        Some((h, w)) => Ok(Pair::new(h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
        None => Ok(Pair::square(s.parse().map_err(|_| bad())?)),
    }
}

fn parse_gclp(kv: &Args<'_>) -> std::result::Result<GclpSpec, String> {
    let kernel = parse_pair(kv.get("kernel").ok_or("missing `kernel=`")?)?;
    let stride = kv.get("stride").map(parse_pair).transpose()?.unwrap_or(Pair::square(1));
    let dilation = kv
        .get("dilation")
        .map(parse_pair)
        .transpose()?
        .unwrap_or(Pair::square(1));
    let padding = match kv.get("pad").unwrap_or("full") {
        "full" => Padding::Full,
        "none" | "valid" => Padding::None,
        "final" => Padding::Final,
        other => return Err(format!("unknown padding `{other}` (full, none, final)")),
    };
    let selection = match kv.get("channels").unwrap_or("depthwise") {
        "depthwise" => ChannelSelection::Depthwise,
        "onehot" | "onehot:all" => ChannelSelection::OneHot(None),
        other => match other.strip_prefix("onehot:") {
            Some(n) => ChannelSelection::OneHot(Some(n.parse().map_err(|_| format!("bad channel count `{n}`"))?)),
            None => return Err(format!("unknown channel selection `{other}`")),
        },
    };
    Ok(GclpSpec {
        kernel,
        stride,
        dilation,
        padding,
        selection,
    })
}
