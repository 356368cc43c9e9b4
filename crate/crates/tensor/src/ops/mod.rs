mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;
mod softmax;
