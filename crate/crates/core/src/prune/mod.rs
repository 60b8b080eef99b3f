//! Keep-set selection, structural rewrites and compression counters.

mod count;
mod rewrite;
mod select;

pub use count::{count_filters, count_flops, count_graph_params, count_params};
pub use rewrite::{prune_conv_pair, reinit_pruned_layer};
pub use select::{select_keep_set, PruneDecision};
