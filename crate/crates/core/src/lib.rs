//! Adaptive, layered music generation for games.
//!
//! A small decoder-only Transformer learns a style from a MIDI corpus; a
//! server keeps pre-generated four-layer pieces per emotion strategy and hands
//! them to game clients, activating more layers as arousal rises.

pub mod music;
pub mod model;
pub mod trainer;
pub mod emotion;
pub mod strategy;
pub mod layers;
pub mod server;
pub mod emulator;
