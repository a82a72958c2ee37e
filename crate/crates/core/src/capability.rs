//! Tagged, bounded memory references.
//!
//! A [`Capability`] is the only way to name memory in the simulator. It carries
//! its own bounds and permissions, can only ever be narrowed, and loses its
//! validity tag on any illegitimate manipulation. Sealed capabilities are
//! opaque: they cannot be dereferenced or modified and are only unsealed by the
//! kernel gateway when invoked.

use std::fmt;

use bitflags::bitflags;
use thiserror::Error;

use crate::tagged_memory::PAGE_SIZE;

bitflags! {
    /// Permissions carried by a capability.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
    pub struct Perms: u8 {
        const LOAD = 1 << 0;
        const STORE = 1 << 1;
        const EXEC = 1 << 2;
        const LOAD_CAP = 1 << 3;
        const STORE_CAP = 1 << 4;
        const SYSTEM = 1 << 5;
    }
}

impl Perms {
    /// Ordinary read/write data memory, including capability load/store.
    pub const DATA: Perms = Perms::LOAD
        .union(Perms::STORE)
        .union(Perms::LOAD_CAP)
        .union(Perms::STORE_CAP);
    /// Read-only capability table access.
    pub const READ_CAPS: Perms = Perms::LOAD.union(Perms::LOAD_CAP);
    /// Executable code.
    pub const CODE: Perms = Perms::LOAD.union(Perms::EXEC).union(Perms::LOAD_CAP);
}

/// Object type of a sealed capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OType(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CapError {
    #[error("requested bounds [{base:#x}, +{length:#x}) exceed the source bounds")]
    BoundsWiden { base: u64, length: u64 },
    #[error("requested permissions {requested:?} are not held by the source ({held:?})")]
    PermsWiden { requested: Perms, held: Perms },
    #[error("sealed capability cannot be modified")]
    SealedMutation,
    #[error("capability can only be unsealed by the kernel gateway")]
    InvalidInvoke,
    #[error("capability tag is not set")]
    Untagged,
}

/// How a derivation that would widen a capability is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeriveMode {
    /// Widening and sealed mutation are hard errors.
    #[default]
    Strict,
    /// Widening and sealed mutation produce a tag-cleared result, as hardware does.
    Permissive,
}

/// Proof that the caller is the kernel gateway dispatcher.
///
/// Only code inside this crate can mint one.
#[derive(Debug)]
pub struct GatewayKey(());

impl GatewayKey {
    pub(crate) fn mint() -> GatewayKey {
        GatewayKey(())
    }
}

/// Who is asking to unseal a capability.
#[derive(Debug, Clone, Copy)]
pub enum InvokeContext<'a> {
    Process,
    Gateway(&'a GatewayKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("region [{base:#x}, +{size:#x}) is not page aligned")]
pub struct RegionError {
    pub base: u64,
    pub size: u64,
}

/// A page-aligned, contiguous span of the virtual address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region {
    base: u64,
    size: u64,
}

impl Region {
    pub fn new(base: u64, size: u64) -> Result<Region, RegionError> {
        if !base.is_multiple_of(PAGE_SIZE)
            || !size.is_multiple_of(PAGE_SIZE)
            || base.checked_add(size).is_none()
        {
            return Err(RegionError { base, size });
        }
        Ok(Region { base, size })
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// One past the last byte.
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn pages(&self) -> u64 {
        self.size / PAGE_SIZE
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    /// Whether `[lo, hi)` lies entirely inside the region.
    pub fn contains_range(&self, lo: u64, hi: u64) -> bool {
        lo <= hi && lo >= self.base && hi <= self.end()
    }

    /// Whether the closed interval `[lo, hi]` meets the closed region `[base, end]`.
    ///
    /// Closed on both sides so zero-length and one-past-the-end references
    /// count as touching the region they were derived from.
    pub fn touches(&self, lo: u64, hi: u64) -> bool {
        lo <= self.end() && hi >= self.base
    }

    pub fn is_disjoint(&self, other: &Region) -> bool {
        self.end() <= other.base || other.end() <= self.base
    }

    /// Translate `addr` by the offset between `self` and `to`.
    pub fn translate(&self, addr: u64, to: &Region) -> u64 {
        addr.wrapping_sub(self.base).wrapping_add(to.base)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.base, self.end())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Capability {
    base: u64,
    length: u64,
    cursor: u64,
    perms: Perms,
    otype: Option<OType>,
    tag: bool,
}

impl Capability {
    /// A fresh, tagged, unsealed capability. Only boot code and the kernel mint these.
    pub fn new_root(base: u64, length: u64, perms: Perms) -> Capability {
        assert!(
            base.checked_add(length).is_some(),
            "capability bounds overflow"
        );
        Capability {
            base,
            length,
            cursor: base,
            perms,
            otype: None,
            tag: true,
        }
    }

    /// The untagged all-zero value.
    pub const fn null() -> Capability {
        Capability {
            base: 0,
            length: 0,
            cursor: 0,
            perms: Perms::empty(),
            otype: None,
            tag: false,
        }
    }

    /// Reassemble raw fields. The caller decides whether the tag is valid.
    pub(crate) fn from_parts(
        base: u64,
        length: u64,
        cursor: u64,
        perms: Perms,
        otype: Option<OType>,
        tag: bool,
    ) -> Capability {
        Capability {
            base,
            length,
            cursor,
            perms,
            otype,
            tag,
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    /// One past the highest addressable byte.
    pub fn top(&self) -> u64 {
        self.base.saturating_add(self.length)
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn perms(&self) -> Perms {
        self.perms
    }

    pub fn otype(&self) -> Option<OType> {
        self.otype
    }

    pub fn is_tagged(&self) -> bool {
        self.tag
    }

    pub fn is_sealed(&self) -> bool {
        self.otype.is_some()
    }

    /// Same bits with the validity tag cleared.
    pub fn cleared(&self) -> Capability {
        Capability {
            tag: false,
            ..*self
        }
    }

    /// Whether `[cursor, cursor + width)` lies inside the bounds.
    pub fn in_bounds(&self, width: u64) -> bool {
        match self.cursor.checked_add(width) {
            Some(end) => self.cursor >= self.base && end <= self.top(),
            None => false,
        }
    }

    pub fn bounds_within(&self, region: &Region) -> bool {
        region.contains_range(self.base, self.top())
    }

    fn check_mutable(&self) -> Result<(), CapError> {
        if !self.tag {
            return Err(CapError::Untagged);
        }
        if self.is_sealed() {
            return Err(CapError::SealedMutation);
        }
        Ok(())
    }

    /// Narrow the bounds to `[new_base, new_base + new_length)`.
    ///
    /// The cursor moves to `new_base`; permissions are kept.
    pub fn derive(&self, new_base: u64, new_length: u64) -> Result<Capability, CapError> {
        self.derive_with(new_base, new_length, self.perms, DeriveMode::Strict)
    }

    /// Narrow bounds and permissions at once.
    pub fn derive_with(
        &self,
        new_base: u64,
        new_length: u64,
        perms: Perms,
        mode: DeriveMode,
    ) -> Result<Capability, CapError> {
        let outcome = self.check_mutable().and_then(|()| {
            let top = new_base
                .checked_add(new_length)
                .ok_or(CapError::BoundsWiden {
                    base: new_base,
                    length: new_length,
                })?;
            if new_base < self.base || top > self.top() {
                return Err(CapError::BoundsWiden {
                    base: new_base,
                    length: new_length,
                });
            }
            if !self.perms.contains(perms) {
                return Err(CapError::PermsWiden {
                    requested: perms,
                    held: self.perms,
                });
            }
            Ok(Capability {
                base: new_base,
                length: new_length,
                cursor: new_base,
                perms,
                otype: None,
                tag: true,
            })
        });
        match (outcome, mode) {
            (Err(CapError::Untagged), _) => Err(CapError::Untagged),
            (Err(_), DeriveMode::Permissive) => Ok(self.cleared()),
            (res, _) => res,
        }
    }

    /// Drop permissions, keeping bounds and cursor.
    pub fn restrict_perms(&self, perms: Perms) -> Result<Capability, CapError> {
        self.check_mutable()?;
        if !self.perms.contains(perms) {
            return Err(CapError::PermsWiden {
                requested: perms,
                held: self.perms,
            });
        }
        Ok(Capability { perms, ..*self })
    }

    /// Move the cursor. Out-of-bounds cursors are representable and fault on use.
    pub fn set_cursor(&self, addr: u64) -> Result<Capability, CapError> {
        self.check_mutable()?;
        Ok(Capability {
            cursor: addr,
            ..*self
        })
    }

    pub fn seal(&self, otype: OType) -> Result<Capability, CapError> {
        self.check_mutable()?;
        Ok(Capability {
            otype: Some(otype),
            ..*self
        })
    }

    /// Unseal for dispatch. Only the gateway holds the key that allows it.
    pub fn unseal_invoke(&self, ctx: InvokeContext<'_>) -> Result<Capability, CapError> {
        match ctx {
            InvokeContext::Process => Err(CapError::InvalidInvoke),
            InvokeContext::Gateway(_) => {
                if !self.tag {
                    return Err(CapError::Untagged);
                }
                if !self.is_sealed() {
                    return Err(CapError::InvalidInvoke);
                }
                Ok(Capability {
                    otype: None,
                    ..*self
                })
            }
        }
    }

    /// Translate a capability copied from `parent` memory so it refers to `child`.
    ///
    /// References into the parent are shifted by the region offset and clamped
    /// to the child. References already inside the child are untouched. Anything
    /// else that is not a sealed gateway entry loses its tag. Untagged values
    /// pass through unchanged.
    pub fn rebase_for_child(&self, parent: &Region, child: &Region) -> Capability {
        if !self.tag {
            return *self;
        }
        let (lo, hi) = (self.base, self.top());
        if child.contains_range(lo, hi) {
            return *self;
        }
        let hits_parent =
            parent.touches(lo, hi) || (self.cursor >= parent.base() && self.cursor <= parent.end());
        if self.is_sealed() {
            // Sealed values cannot be rewritten. Kernel entries live outside
            // every process region and stay valid.
            return if hits_parent || child.touches(lo, hi) {
                self.cleared()
            } else {
                *self
            };
        }
        if hits_parent {
            let delta = child.base() as i128 - parent.base() as i128;
            let new_lo = (lo as i128 + delta).max(child.base() as i128);
            let new_hi = (hi as i128 + delta).min(child.end() as i128);
            let cursor = parent.translate(self.cursor, child);
            if new_lo > new_hi {
                return Capability {
                    cursor,
                    tag: false,
                    ..*self
                };
            }
            return Capability {
                base: new_lo as u64,
                length: (new_hi - new_lo) as u64,
                cursor,
                ..*self
            };
        }
        if child.touches(lo, hi) {
            let new_lo = lo.max(child.base());
            let new_hi = hi.min(child.end());
            if new_lo <= new_hi {
                return Capability {
                    base: new_lo,
                    length: new_hi - new_lo,
                    ..*self
                };
            }
        }
        self.cleared()
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cap[{:#x}+{:#x} @{:#x} {:?}",
            self.base, self.length, self.cursor, self.perms
        )?;
        if let Some(OType(t)) = self.otype {
            write!(f, " sealed:{t}")?;
        }
        if !self.tag {
            write!(f, " untagged")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cap(base: u64, len: u64) -> Capability {
        Capability::new_root(base, len, Perms::DATA)
    }

    fn regions() -> (Region, Region) {
        (
            Region::new(0x1000_0000, 0x0400_0000).unwrap(),
            Region::new(0x5000_0000, 0x0400_0000).unwrap(),
        )
    }

    #[test]
    fn derive_narrowing_keeps_perms() {
        let c = cap(0x1000, 0x1000).derive(0x1200, 0x100).unwrap();
        assert_eq!(
            (c.base(), c.length(), c.perms()),
            (0x1200, 0x100, Perms::DATA)
        );
        assert!(c.is_tagged());
    }

    #[test]
    fn derive_widening_is_an_error() {
        assert!(matches!(
            cap(0x1000, 0x100).derive(0x0F00, 0x400),
            Err(CapError::BoundsWiden { .. })
        ));
    }

    #[test]
    fn derive_widening_permissive_clears_tag() {
        let c = cap(0x1000, 0x100)
            .derive_with(0x0F00, 0x400, Perms::DATA, DeriveMode::Permissive)
            .unwrap();
        assert!(!c.is_tagged());
        assert_eq!(c.base(), 0x1000);
    }

    #[test]
    fn derive_from_sealed_fails() {
        let s = cap(0x1000, 0x100).seal(OType(3)).unwrap();
        assert_eq!(s.derive(0x1000, 0x10), Err(CapError::SealedMutation));
        assert_eq!(s.seal(OType(4)), Err(CapError::SealedMutation));
    }

    #[test]
    fn perms_can_only_shrink() {
        let pcc = Capability::new_root(0x1000, 0x100, Perms::CODE);
        assert!(matches!(
            pcc.restrict_perms(Perms::CODE | Perms::SYSTEM),
            Err(CapError::PermsWiden { .. })
        ));
        assert!(pcc.restrict_perms(Perms::EXEC).is_ok());
    }

    #[test]
    fn set_cursor_allows_out_of_bounds() {
        let c = cap(0x1000, 0x100);
        let inside = c.set_cursor(0x1040).unwrap();
        assert_eq!(inside.cursor(), 0x1040);
        let outside = c.set_cursor(0x2000).unwrap();
        assert!(outside.is_tagged());
        assert!(!outside.in_bounds(1));
        assert_eq!(
            c.seal(OType(1)).unwrap().set_cursor(0x1000),
            Err(CapError::SealedMutation)
        );
    }

    #[test]
    fn unseal_requires_gateway() {
        let sealed = cap(0x1000, 0x10).seal(OType(7)).unwrap();
        assert_eq!(
            sealed.unseal_invoke(InvokeContext::Process),
            Err(CapError::InvalidInvoke)
        );
        let key = GatewayKey::mint();
        let opened = sealed.unseal_invoke(InvokeContext::Gateway(&key)).unwrap();
        assert_eq!(opened, cap(0x1000, 0x10));
    }

    #[test]
    fn rebase_translates_parent_reference() {
        let (parent, child) = regions();
        let c = cap(0x1000_2000, 0x100).set_cursor(0x1000_2040).unwrap();
        let r = c.rebase_for_child(&parent, &child);
        assert_eq!(
            (r.base(), r.length(), r.cursor()),
            (0x5000_2000, 0x100, 0x5000_2040)
        );
        assert!(r.is_tagged());
    }

    #[test]
    fn rebase_clears_foreign_reference() {
        let (parent, child) = regions();
        let c = cap(0x9000_0000, 0x100);
        let r = c.rebase_for_child(&parent, &child);
        assert_eq!(r, c.cleared());
    }

    #[test]
    fn rebase_keeps_kernel_entries() {
        let (parent, child) = regions();
        let entry = cap(0x100_0000, 0x10).seal(OType(9)).unwrap();
        assert_eq!(entry.rebase_for_child(&parent, &child), entry);
        let bad = cap(0x1000_0000, 0x10).seal(OType(9)).unwrap();
        assert!(!bad.rebase_for_child(&parent, &child).is_tagged());
    }

    /// Interval-intersection oracle: translate both ends, intersect with the child.
    fn clamp_oracle(lo: u64, hi: u64, parent: &Region, child: &Region) -> Option<(u64, u64)> {
        let shift = |a: u64| a as i128 - parent.base() as i128 + child.base() as i128;
        let (a, b) = (shift(lo), shift(hi));
        let (c, d) = (child.base() as i128, child.end() as i128);
        let (x, y) = (a.max(c), b.min(d));
        (x <= y).then(|| (x as u64, (y - x) as u64))
    }

    #[test]
    fn rebase_clamps_reference_spanning_parent_end() {
        let (parent, child) = regions();
        let c = cap(parent.end() - 0x100, 0x300);
        let r = c.rebase_for_child(&parent, &child);
        let (base, len) = clamp_oracle(c.base(), c.top(), &parent, &child).unwrap();
        // Frozen from the oracle: [0x53ff_ff00, +0x100).
        assert_eq!((base, len), (0x53ff_ff00, 0x100));
        assert_eq!((r.base(), r.length()), (base, len));
        assert!(r.bounds_within(&child));
    }

    proptest! {
        #[test]
        fn derive_chains_are_monotone(steps in proptest::collection::vec((any::<u16>(), any::<u16>(), any::<u8>(), any::<bool>()), 1..20)) {
            let root = Capability::new_root(0x10_0000, 0x1_0000, Perms::all());
            let mut c = root;
            for (a, b, p, cursor) in steps {
                let nb = c.base().wrapping_add(a as u64).wrapping_sub(0x100);
                let nl = b as u64;
                let perms = Perms::from_bits_truncate(p);
                let attempt = if cursor { c.set_cursor(nb) } else { c.derive_with(nb, nl, perms, DeriveMode::Strict) };
                match attempt {
                    Ok(next) => c = next,
                    Err(e) => {
                        let widening = nb < c.base() || nb.saturating_add(nl) > c.top() || !c.perms().contains(perms);
                        prop_assert!(widening, "unexpected error {e:?}");
                    }
                }
                prop_assert!(c.is_tagged());
                prop_assert!(c.base() >= root.base() && c.top() <= root.top());
                prop_assert!(root.perms().contains(c.perms()));
            }
        }

        #[test]
        fn rebase_preserves_offsets_and_is_idempotent(off in 0u64..0x0400_0000, len in 0u64..0x1000) {
            let (parent, child) = regions();
            let base = parent.base() + off;
            let c = cap(base, len.min(parent.end() - base));
            let r = c.rebase_for_child(&parent, &child);
            prop_assert_eq!(r.cursor() - child.base(), c.cursor() - parent.base());
            prop_assert!(r.bounds_within(&child));
            prop_assert_eq!(r.rebase_for_child(&parent, &child), r);
        }
    }
}
