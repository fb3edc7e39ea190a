//! Canonical parameter names.
//!
//! `embed.weight`, `lm_head.weight` (untied only), `final_norm.weight`, and
//! per layer `layers.{l}.` followed by `attn_norm.weight`, `attn.{q,k,v,o}_proj`,
//! `attn.{q,k}_norm`, `ffn_norm.weight`, then either `ffn.{gate,up,down}` or
//! `moe.router` and `moe.experts.{e}.{gate,up,down}`.

pub const EMBED: &str = "embed.weight";
pub const LM_HEAD: &str = "lm_head.weight";
pub const FINAL_NORM: &str = "final_norm.weight";

pub fn attn_norm(l: usize) -> String {
    format!("layers.{l}.attn_norm.weight")
}
pub fn q_proj(l: usize) -> String {
    format!("layers.{l}.attn.q_proj")
}
pub fn k_proj(l: usize) -> String {
    format!("layers.{l}.attn.k_proj")
}
pub fn v_proj(l: usize) -> String {
    format!("layers.{l}.attn.v_proj")
}
pub fn o_proj(l: usize) -> String {
    format!("layers.{l}.attn.o_proj")
}
pub fn q_norm(l: usize) -> String {
    format!("layers.{l}.attn.q_norm")
}
pub fn k_norm(l: usize) -> String {
    format!("layers.{l}.attn.k_norm")
}
pub fn ffn_norm(l: usize) -> String {
    format!("layers.{l}.ffn_norm.weight")
}
pub fn ffn_gate(l: usize) -> String {
    format!("layers.{l}.ffn.gate")
}
pub fn ffn_up(l: usize) -> String {
    format!("layers.{l}.ffn.up")
}
pub fn ffn_down(l: usize) -> String {
    format!("layers.{l}.ffn.down")
}
pub fn router(l: usize) -> String {
    format!("layers.{l}.moe.router")
}
pub fn expert_gate(l: usize, e: usize) -> String {
    format!("layers.{l}.moe.experts.{e}.gate")
}
pub fn expert_up(l: usize, e: usize) -> String {
    format!("layers.{l}.moe.experts.{e}.up")
}
pub fn expert_down(l: usize, e: usize) -> String {
    format!("layers.{l}.moe.experts.{e}.down")
}

/// Norm gains are initialized to one and excluded from weight decay.
pub fn is_norm_gain(name: &str) -> bool {
    name.ends_with("norm.weight") || name.ends_with("_norm")
}
