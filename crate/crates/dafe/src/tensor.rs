/// N x C x H x W layout descriptor for dense feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(
            n >= 1 && c >= 1 && h >= 1 && w >= 1,
            "all dimensions must be >= 1, got {n}x{c}x{h}x{w}"
        );
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of element (n, c, y, x) in row-major NCHW order.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense f64 tensor in NCHW layout with optional paired gradient storage.
/// f64 throughout keeps finite-difference gradient checks meaningful; the
/// on-disk model format quantizes to f32.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length {} does not match shape {shape}",
            data.len()
        );
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![v])
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[self.shape.idx(n, c, y, x)]
    }

    /// Immutable view of one HxW plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape.h * self.shape.w;
        let base = (n * self.shape.c + c) * hw;
        &self.data[base..base + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape.h * self.shape.w;
        let base = (n * self.shape.c + c) * hw;
        &mut self.data[base..base + hw]
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
