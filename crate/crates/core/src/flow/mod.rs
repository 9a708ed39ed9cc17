pub mod backprop;
pub mod checkpoint;
pub mod layer;
pub mod model;
pub mod numeric;
pub mod perturb;
