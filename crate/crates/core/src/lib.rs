pub mod geom;
pub mod numerics;
pub mod roadnet;
pub mod rng;
pub mod vehicle;
pub mod mapview;
pub mod perception;
pub mod policy;
pub mod ppo;
