//! Flow switching: rule table, control protocol and the switch that ties
//! them together.

mod switch;
mod table;
pub mod wire;

pub use switch::FlowSwitch;
pub use table::{FlowAction, FlowMatch, FlowRule, FlowTable, PacketMeta, RuleCounters, RuleSpec, TableError};
pub use wire::{ControlMessage, FlowMod, FlowStats, MessageBody};
