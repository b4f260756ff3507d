//! Shape manipulation ops. All of these are pure data movement, so every
//! backward is the inverse movement applied to the incoming gradient.

use ndarray::{Axis, IxDyn, Slice};

use super::{Arr, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(self.len(), n, "reshape {:?} -> {:?}", self.shape(), shape);
        let out = self
            .value()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let src = self.clone();
        let orig = self.shape().to_vec();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let back = g
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&orig))
                .expect("reshape backward");
            sink.accumulate(&src, back);
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.shape().len(), "permute rank");
        let out = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let src = self.clone();
        // Inverse permutation sends axis axes[i] back to position i.
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let back = g
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            sink.accumulate(&src, back);
        })
    }

    /// Concatenate along `axis`. Backward splits the gradient back.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let parts_c: Vec<Tensor> = parts.to_vec();
        Tensor::from_op(out, parts_c.clone(), move |g, sink| {
            let mut offset = 0isize;
            for (p, &sz) in parts_c.iter().zip(&sizes) {
                let piece = g
                    .slice_axis(Axis(axis), Slice::new(offset, Some(offset + sz as isize), 1))
                    .to_owned();
                sink.accumulate(p, piece);
                offset += sz as isize;
            }
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape()[axis], "narrow out of range");
        let out = self
            .value()
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        let src = self.clone();
        let full = self.shape().to_vec();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let mut back = Arr::zeros(IxDyn(&full));
            back.slice_axis_mut(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .assign(g);
            sink.accumulate(&src, back);
        })
    }

    /// Gather rows along `axis` by index. Duplicate indices scatter-add in backward.
    pub fn index_select(&self, axis: usize, idx: &[usize]) -> Tensor {
        for &i in idx {
            assert!(i < self.shape()[axis], "index_select out of range");
        }
        let out = self.value().select(Axis(axis), idx);
        let src = self.clone();
        let full = self.shape().to_vec();
        let idx_c = idx.to_vec();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let mut back = Arr::zeros(IxDyn(&full));
            for (pos, &i) in idx_c.iter().enumerate() {
                let gi = g.index_axis(Axis(axis), pos);
                let mut bi = back.index_axis_mut(Axis(axis), i);
                bi += &gi;
            }
            sink.accumulate(&src, back);
        })
    }

    /// Insert a size-1 axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Remove a size-1 axis at `axis`.
    pub fn squeeze(&self, axis: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        assert_eq!(shape[axis], 1, "squeeze non-unit axis");
        shape.remove(axis);
        self.reshape(&shape)
    }

    /// Broadcast to `shape` explicitly (backward sums back).
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let out = self
            .value()
            .broadcast(IxDyn(shape))
            .expect("broadcast_to")
            .to_owned();
        let src = self.clone();
        let orig = self.shape().to_vec();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            sink.accumulate(&src, super::reduce_to_shape(g, &orig));
        })
    }
}
