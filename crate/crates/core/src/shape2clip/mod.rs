//! The learned shape-to-prompt residual and the rules for applying it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::PromptEmbedding;
use crate::error::{Error, Result};
use crate::prompts::TokenLayout;

mod model;
mod params;

pub use model::{backward, forward, forward_with_cache, ForwardCache};
pub use params::{
    init_params, load_params, save_params, BlockParams, ModelDims, Shape2ClipParams, DEFAULT_BLOCKS, FORMAT_VERSION,
};

/// `77 × D_t` offset added to selected prompt rows.
pub type ResidualDelta = PromptEmbedding;

/// Which prompt rows receive the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenStrategy {
    AllTokens,
    ObjectOnly,
    EosOnly,
    ObjectAndEos,
}

impl TokenStrategy {
    pub const ALL: [TokenStrategy; 4] = [
        TokenStrategy::AllTokens,
        TokenStrategy::ObjectOnly,
        TokenStrategy::EosOnly,
        TokenStrategy::ObjectAndEos,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenStrategy::AllTokens => "all_tokens",
            TokenStrategy::ObjectOnly => "object_only",
            TokenStrategy::EosOnly => "eos_only",
            TokenStrategy::ObjectAndEos => "object_and_eos",
        }
    }

    pub fn selects(&self, row: usize, layout: &TokenLayout) -> bool {
        let in_shape = layout.shape_span().contains(&row);
        let is_eos = row == layout.eos_index;
        match self {
            TokenStrategy::AllTokens => true,
            TokenStrategy::ObjectOnly => in_shape,
            TokenStrategy::EosOnly => is_eos,
            TokenStrategy::ObjectAndEos => in_shape || is_eos,
        }
    }
}

impl fmt::Display for TokenStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenStrategy::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            Error::invalid(
                "strategy",
                format!("`{s}` is not one of all_tokens, object_only, eos_only, object_and_eos"),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub lambda: f64,
    pub strategy: TokenStrategy,
}

impl GuidanceSpec {
    pub fn new(lambda: f64, strategy: TokenStrategy) -> Result<Self> {
        validate_lambda(lambda)?;
        Ok(Self { lambda, strategy })
    }

    /// Full-strength residual on every row, as used while training.
    pub fn training() -> Self {
        Self {
            lambda: 1.0,
            strategy: TokenStrategy::AllTokens,
        }
    }
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            strategy: TokenStrategy::ObjectAndEos,
        }
    }
}

pub fn validate_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `T'[r] = T[r] + λ·δT[r]` on the rows the strategy selects; every other row is copied unchanged.
pub fn apply_residual(
    t: &PromptEmbedding,
    delta: &ResidualDelta,
    spec: &GuidanceSpec,
    layout: &TokenLayout,
) -> Result<PromptEmbedding> {
    validate_lambda(spec.lambda)?;
    if t.dim() != delta.dim() {
        return Err(Error::dims(
            "residual",
            format!("{}x{}", t.nrows(), t.ncols()),
            format!("{}x{}", delta.nrows(), delta.ncols()),
        ));
    }
    layout.validate(t.nrows())?;
    let mut out = t.clone();
    if spec.lambda == 0.0 {
        return Ok(out);
    }
    for (r, (mut row, d)) in out.rows_mut().into_iter().zip(delta.rows()).enumerate() {
        if spec.strategy.selects(r, layout) {
            row.scaled_add(spec.lambda, &d);
        }
    }
    Ok(out)
}
