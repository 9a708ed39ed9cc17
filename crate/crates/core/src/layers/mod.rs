pub mod activation;
pub mod coupling;
pub mod init;
pub mod inv_conv;
pub mod modality;
pub mod spline;
