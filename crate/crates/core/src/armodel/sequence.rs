use serde::{Deserialize, Serialize};

use super::ArError;
use crate::numerics::Float;
use crate::tokenizers::{Vocabulary, BOI, BOS, EOI, PAD, REP};

/// Where the alignment signal attaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Every position predicting an image token.
    #[serde(rename = "hybnext")]
    HybNext,
    /// A single `<REP>` slot right before the first image token.
    Rep,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Text,
    Boi,
    Image,
    Rep,
    Pad,
}

/// Model input with parallel roles. `targets[t]` is the token predicted at
/// position `t`: `ids[t + 1]`, and `<EOI>` after the last image token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub targets: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True where the position is padding (masked as an attention key).
    pub fn pad_mask(&self) -> Vec<bool> {
        self.roles.iter().map(|&r| r == Role::Pad).collect()
    }

    /// Role of the token predicted at `t`; `None` for the final `<EOI>` target.
    pub fn target_role(&self, t: usize) -> Option<Role> {
        self.roles.get(t + 1).copied()
    }

    pub fn position_of(&self, role: Role) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }
}

fn text_roles(s_t: &[u32]) -> Result<Vec<Role>, ArError> {
    if s_t.first() != Some(&BOS) {
        return Err(ArError::Shape("text span must start with <BOS>".into()));
    }
    let mut seen_pad = false;
    let mut roles = Vec::with_capacity(s_t.len());
    for &id in s_t {
        if id == PAD {
            seen_pad = true;
            roles.push(Role::Pad);
        } else if seen_pad {
            return Err(ArError::Shape("text token after padding".into()));
        } else {
            roles.push(Role::Text);
        }
    }
    Ok(roles)
}

/// `[<BOS>, text.., (<PAD>..), <BOI>, (<REP>)]`: the conditioning prefix.
pub fn build_prompt(s_t: &[u32], mechanism: Mechanism) -> Result<(Vec<u32>, Vec<Role>), ArError> {
    let mut roles = text_roles(s_t)?;
    let mut ids = s_t.to_vec();
    ids.push(BOI);
    roles.push(Role::Boi);
    if mechanism == Mechanism::Rep {
        ids.push(REP);
        roles.push(Role::Rep);
    }
    Ok((ids, roles))
}

/// Full teacher-forcing sequence for a text span `s_t` (starting with `<BOS>`,
/// optionally right-padded) and `grid_tokens` image ids.
pub fn build_sequence(
    s_t: &[u32],
    s_i: &[u32],
    mechanism: Mechanism,
    vocab: &Vocabulary,
    grid_tokens: usize,
) -> Result<TokenSequence, ArError> {
    if s_i.len() != grid_tokens {
        return Err(ArError::Shape(format!("expected {grid_tokens} image tokens, got {}", s_i.len())));
    }
    if let Some(&bad) = s_i.iter().find(|&&i| !vocab.is_image_token(i)) {
        return Err(ArError::TokenOutOfRange { id: bad, size: vocab.len() });
    }
    let (mut ids, mut roles) = build_prompt(s_t, mechanism)?;
    ids.extend_from_slice(s_i);
    roles.extend(std::iter::repeat_n(Role::Image, s_i.len()));
    let mut targets = ids[1..].to_vec();
    targets.push(EOI);
    Ok(TokenSequence { ids, roles, targets })
}

/// Caption-only sequence for language-model pretraining: the last text token
/// predicts `<EOI>` and padding predicts nothing.
pub fn build_text_sequence(s_t: &[u32]) -> Result<TokenSequence, ArError> {
    let roles = text_roles(s_t)?;
    let ids = s_t.to_vec();
    let mut targets: Vec<u32> = ids[1..].to_vec();
    targets.push(PAD);
    let last = roles.iter().rposition(|&r| r == Role::Text).expect("starts with <BOS>");
    targets[last] = EOI;
    Ok(TokenSequence { ids, roles, targets })
}

/// Loss weights per position: 1 where the target is an image token or the
/// closing `<EOI>`, plus text targets when `loss_on_text` is set.
pub fn loss_weights<T: Float>(seq: &TokenSequence, loss_on_text: bool) -> Vec<T> {
    (0..seq.len())
        .map(|t| {
            let on = seq.targets[t] == EOI
                || match seq.target_role(t) {
                    Some(Role::Image) => true,
                    Some(Role::Text) => loss_on_text,
                    _ => false,
                };
            if on {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect()
}
