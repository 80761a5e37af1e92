//! Attention mask over the three-summary-token layout.
//!
//! The joint summary (`Cls`), the text summary (`ClsText`) and the image
//! summary (`ClsImage`) never attend to each other. The text summary never
//! sees image tokens and the image summary never sees text tokens, in either
//! direction. Padding is invisible to every live position and only attends
//! to itself. Every other pair is open.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tape::NEG_INF;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Cls,
    ClsText,
    ClsImage,
    Text,
    Image,
    Pad,
}

impl Role {
    /// Three-character header used by [`AttentionMask::render`].
    pub fn short(self) -> &'static str {
        match self {
            Role::Cls => "CLS",
            Role::ClsText => "CLT",
            Role::ClsImage => "CLI",
            Role::Text => "TXT",
            Role::Image => "IMG",
            Role::Pad => "PAD",
        }
    }

    fn is_summary(self) -> bool {
        matches!(self, Role::Cls | Role::ClsText | Role::ClsImage)
    }
}

/// Glyph for a forbidden pair in [`AttentionMask::render`].
pub const BLOCKED_GLYPH: char = '■';
/// Glyph for an allowed pair in [`AttentionMask::render`].
pub const OPEN_GLYPH: char = '·';

/// Role sequence of the fixed padded layout:
/// `[CLS, CLS_T, CLS_I, text.., PAD.., image.., PAD..]`.
pub fn layout_roles(n_text: usize, n_img: usize, max_text_len: usize, max_regions: usize) -> Vec<Role> {
    let mut roles = vec![Role::Cls, Role::ClsText, Role::ClsImage];
    roles.extend((0..max_text_len).map(|i| if i < n_text { Role::Text } else { Role::Pad }));
    roles.extend((0..max_regions).map(|i| if i < n_img { Role::Image } else { Role::Pad }));
    roles
}

fn blocked(q: Role, k: Role, same_position: bool) -> bool {
    use Role::*;
    if same_position {
        return false;
    }
    if q.is_summary() && k.is_summary() {
        return true;
    }
    match (q, k) {
        (ClsText, Image) | (Image, ClsText) => true,
        (ClsImage, Text) | (Text, ClsImage) => true,
        (_, Pad) | (Pad, _) => true,
        _ => false,
    }
}

/// Additive `[L, L]` mask with entries in `{0, NEG_INF}`; row = query, column = key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    matrix: Tensor,
    roles: Vec<Role>,
}

/// Builds the mask for a role sequence containing exactly one of each summary role.
pub fn build_mask(roles: &[Role]) -> Result<AttentionMask> {
    for summary in [Role::Cls, Role::ClsText, Role::ClsImage] {
        let count = roles.iter().filter(|&&r| r == summary).count();
        if count != 1 {
            return Err(Error::Roles(format!("expected exactly one {summary:?}, found {count}")));
        }
    }
    let n = roles.len();
    let mut data = vec![0.0; n * n];
    for (q, &rq) in roles.iter().enumerate() {
        for (k, &rk) in roles.iter().enumerate() {
            if blocked(rq, rk, q == k) {
                data[q * n + k] = NEG_INF;
            }
        }
    }
    Ok(AttentionMask { matrix: Tensor::new(vec![n, n], data)?, roles: roles.to_vec() })
}

impl AttentionMask {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// True when query `q` may attend to key `k`.
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.matrix.data()[q * self.len() + k] == 0.0
    }

    /// Character grid: a header of role codes, then one row per query with
    /// `■` for blocked and `·` for open keys. Every line ends with `\n`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let header: Vec<&str> = self.roles.iter().map(|r| r.short()).collect();
        let _ = writeln!(out, "    {}", header.join(" "));
        for (q, role) in self.roles.iter().enumerate() {
            let cells: Vec<String> = (0..self.len())
                .map(|k| {
                    let g = if self.allowed(q, k) { OPEN_GLYPH } else { BLOCKED_GLYPH };
                    format!(" {g} ")
                })
                .collect();
            let _ = writeln!(out, "{} {}", role.short(), cells.join(" "));
        }
        out
    }
}

/// `out[i][j]` is true when position `j`'s input can influence position `i`'s
/// output after `n_layers` rounds of masked attention: the boolean
/// `n_layers`-th power of (allowed attention or identity).
pub fn reachability(mask: &AttentionMask, n_layers: usize) -> Vec<Vec<bool>> {
    let n = mask.len();
    let step: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j || mask.allowed(i, j)).collect()).collect();
    let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for _ in 0..n_layers {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for m in 0..n {
                if !step[i][m] {
                    continue;
                }
                for j in 0..n {
                    if reach[m][j] {
                        next[i][j] = true;
                    }
                }
            }
        }
        reach = next;
    }
    reach
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Role::*;

    const X: f64 = NEG_INF;

    #[test]
    fn five_position_rule_table() {
        let mask = build_mask(&[Cls, ClsText, ClsImage, Text, Image]).unwrap();
        let expected = [
            [0.0, X, X, 0.0, 0.0],
            [X, 0.0, X, 0.0, X],
            [X, X, 0.0, X, 0.0],
            [0.0, 0.0, X, 0.0, 0.0],
            [0.0, X, 0.0, 0.0, 0.0],
        ];
        assert_eq!(mask.matrix().data(), expected.concat().as_slice());
    }

    #[test]
    fn pad_block_is_never_attended() {
        let roles = layout_roles(3, 0, 4, 3);
        let mask = build_mask(&roles).unwrap();
        let n = roles.len();
        for q in 0..n {
            for k in 7..n {
                assert_eq!(mask.allowed(q, k), q == k, "q={q} k={k}");
            }
        }
    }

    #[test]
    fn summary_block_is_symmetric() {
        let mask = build_mask(&layout_roles(2, 2, 2, 2)).unwrap();
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(mask.allowed(q, k), mask.allowed(k, q));
            }
        }
    }

    #[test]
    fn missing_or_duplicate_summary_roles_are_errors() {
        assert!(build_mask(&[Cls, ClsText, Text]).is_err());
        assert!(build_mask(&[Cls, ClsText, ClsImage, Cls]).is_err());
    }

    #[test]
    fn reachability_examples() {
        let roles = layout_roles(2, 3, 2, 3);
        let mask = build_mask(&roles).unwrap();
        let one = reachability(&mask, 1);
        for img in 5..8 {
            assert!(!one[1][img]);
            assert!(!one[2][3]);
        }
        let two = reachability(&mask, 2);
        assert!(two[1][5]);
        assert!(two[2][3]);

        let text_only = build_mask(&layout_roles(2, 0, 2, 3)).unwrap();
        let r = reachability(&text_only, 1);
        assert!((5..8).all(|j| !r[0][j]));
    }

    #[test]
    fn render_uses_documented_glyphs() {
        let mask = build_mask(&[Cls, ClsText, ClsImage, Text, Image]).unwrap();
        let grid = mask.render();
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines[0], "    CLS CLT CLI TXT IMG");
        assert_eq!(lines[2], "CLT  ■   ·   ■   ·   ■ ");
    }

    fn arb_roles() -> impl Strategy<Value = Vec<Role>> {
        (0usize..5, 0usize..5, 0usize..3, 0usize..3).prop_map(|(t, i, pt, pi)| layout_roles(t, i, t + pt, i + pi))
    }

    proptest! {
        #[test]
        fn entries_are_sentinels_and_live_diagonal_open(roles in arb_roles()) {
            let mask = build_mask(&roles).unwrap();
            for &v in mask.matrix().data() {
                prop_assert!(v == 0.0 || v == NEG_INF);
            }
            for (i, r) in roles.iter().enumerate() {
                if *r != Pad {
                    prop_assert!(mask.allowed(i, i));
                }
            }
            // every row keeps at least one open key
            for q in 0..roles.len() {
                prop_assert!((0..roles.len()).any(|k| mask.allowed(q, k)));
            }
        }

        #[test]
        fn reachability_is_monotone_in_depth(roles in arb_roles(), depth in 0usize..4) {
            let mask = build_mask(&roles).unwrap();
            let a = reachability(&mask, depth);
            let b = reachability(&mask, depth + 1);
            for i in 0..roles.len() {
                for j in 0..roles.len() {
                    prop_assert!(!a[i][j] || b[i][j]);
                }
            }
        }

        #[test]
        fn live_positions_never_reach_pad(roles in arb_roles(), depth in 1usize..4) {
            let mask = build_mask(&roles).unwrap();
            let r = reachability(&mask, depth);
            for i in 0..roles.len() {
                for j in 0..roles.len() {
                    if roles[i] != Pad && roles[j] == Pad {
                        prop_assert!(!r[i][j]);
                    }
                }
            }
        }
    }
}
