//! Conversational control of simulated production machines.
//!
//! Channel input is rate limited, transcribed and turned into a
//! [`mdie::MetaDatagram`], published on the [`broker`], decoded by the
//! [`nlu`] engine and the [`services`] (sessions, context, interpretation,
//! reasoning, authentication), executed as [`faas`] lambdas against
//! [`connectivity`] devices and journaled into the [`blockstore`].

pub mod blockstore;
pub mod broker;
pub mod clock;
pub mod connectivity;
pub mod faas;
pub mod ids;
pub mod mdie;
pub mod nlu;
pub mod platform;
pub mod services;
