use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Ctx, GlobalRef, PlaceError, ShmError, ShmRuntime};
use crate::types::{block_range, NodeId};

/// The part of a distributed array owned by one place.
pub struct DistSlice<T> {
    global_len: usize,
    owner: NodeId,
    offset: usize,
    elements: Vec<T>,
}

impl<T> DistSlice<T> {
    /// Builds `owner`'s block of a `global_len` array spread over `n_places`.
    pub fn new(global_len: usize, n_places: usize, owner: NodeId, init: impl FnMut(usize) -> T) -> Self {
        let r = block_range(global_len, n_places, owner.index());
        DistSlice {
            global_len,
            owner,
            offset: r.start,
            elements: r.map(init).collect(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn global_len(&self) -> usize {
        self.global_len
    }

    fn check_place(&self, ctx: &Ctx) -> Result<(), ShmError> {
        if ctx.place() != self.owner {
            return Err(PlaceError::Remote {
                home: self.owner,
                current: ctx.place(),
            }
            .into());
        }
        Ok(())
    }

    /// Global indices held here: `[offset, offset + len)`.
    pub fn local_indices(&self, ctx: &Ctx) -> Result<Range<usize>, ShmError> {
        self.check_place(ctx)?;
        Ok(self.offset..self.offset + self.elements.len())
    }

    pub fn get(&self, ctx: &Ctx, index: usize) -> Result<&T, ShmError> {
        let r = self.local_indices(ctx)?;
        if !r.contains(&index) {
            return Err(PlaceError::OutOfSlice {
                index,
                owner: self.owner,
                start: r.start,
                end: r.end,
            }
            .into());
        }
        Ok(&self.elements[index - self.offset])
    }

    pub fn elements(&self, ctx: &Ctx) -> Result<&[T], ShmError> {
        self.check_place(ctx)?;
        Ok(&self.elements)
    }
}

/// A block-distributed array: one [`DistSlice`] per place.
#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DistArray<T> {
    global_len: usize,
    slices: Vec<GlobalRef<DistSlice<T>>>,
}

impl<T> Clone for DistArray<T> {
    fn clone(&self) -> Self {
        DistArray {
            global_len: self.global_len,
            slices: self.slices.clone(),
        }
    }
}

impl<T: Send + Sync + 'static> DistArray<T> {
    /// Allocates each place's block in that place's heap, element `i`
    /// being `init(i)`.
    pub fn new(rt: &ShmRuntime, global_len: usize, init: impl Fn(usize) -> T) -> Self {
        let n = rt.n_places();
        let slices = rt
            .places()
            .map(|p| rt.root(p).alloc(DistSlice::new(global_len, n, p, &init)))
            .collect();
        DistArray { global_len, slices }
    }

    pub fn global_len(&self) -> usize {
        self.global_len
    }

    pub fn slice_ref(&self, p: NodeId) -> GlobalRef<DistSlice<T>> {
        self.slices[p.index()]
    }

    /// The calling place's slice.
    pub fn local(&self, ctx: &Ctx) -> Result<Arc<DistSlice<T>>, ShmError> {
        let r = self
            .slices
            .get(ctx.place().index())
            .ok_or(ShmError::UnknownPlace(ctx.place()))?;
        ctx.deref(r)
    }
}
