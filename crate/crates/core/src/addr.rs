//! Identifiers and the rack-wide virtual address format.
//!
//! A virtual address is 48 bits wide. The top 8 bits name the process that
//! allocated the page, so a page keeps its full address when it moves to
//! another process and can never collide with the recipient's own pages:
//!
//! ```text
//!  47        40 39                          12 11          0
//! +------------+------------------------------+-------------+
//! |    pid     |         page number          |   offset    |
//! +------------+------------------------------+-------------+
//! ```

use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

pub const PID_BITS: u32 = 8;
pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: usize = 1 << PAGE_SHIFT;
pub const ADDRESS_BITS: u32 = 48;
pub const PAGE_NUMBER_BITS: u32 = ADDRESS_BITS - PID_BITS - PAGE_SHIFT;
pub const MAX_PROCESSES: usize = 1 << PID_BITS;

const PID_SHIFT: u32 = ADDRESS_BITS - PID_BITS;
const PAGE_NUMBER_MASK: u64 = (1 << PAGE_NUMBER_BITS) - 1;
const OFFSET_MASK: u64 = (PAGE_SIZE as u64) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("process id {0} does not fit in {PID_BITS} bits")]
    PidOutOfRange(u64),
    #[error("page number {0:#x} does not fit in {PAGE_NUMBER_BITS} bits")]
    PageOutOfRange(u64),
    #[error("offset {0} is not below the page size")]
    OffsetOutOfRange(u64),
    #[error("address {0:#x} exceeds {ADDRESS_BITS} bits")]
    AddressOutOfRange(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(u8);

impl ProcessId {
    pub const fn new(id: u8) -> Self {
        ProcessId(id)
    }

    pub fn try_from_u64(id: u64) -> Result<Self, AddressError> {
        u8::try_from(id)
            .map(ProcessId)
            .map_err(|_| AddressError::PidOutOfRange(id))
    }

    pub const fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

macro_rules! element_id {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u16);

        impl $name {
            pub const fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

element_id!(MemId, "M");
element_id!(ComputeId, "C");
element_id!(RackId, "R");

/// A full 48-bit virtual address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(try_from = "u64")]
pub struct VirtualAddress(u64);

impl VirtualAddress {
    pub fn new(pid: ProcessId, page_number: u64, offset: u64) -> Result<Self, AddressError> {
        if page_number > PAGE_NUMBER_MASK {
            return Err(AddressError::PageOutOfRange(page_number));
        }
        if offset > OFFSET_MASK {
            return Err(AddressError::OffsetOutOfRange(offset));
        }
        Ok(VirtualAddress(
            (u64::from(pid.0) << PID_SHIFT) | (page_number << PAGE_SHIFT) | offset,
        ))
    }

    pub fn from_raw(raw: u64) -> Result<Self, AddressError> {
        if raw >> ADDRESS_BITS != 0 {
            return Err(AddressError::AddressOutOfRange(raw));
        }
        Ok(VirtualAddress(raw))
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn pid(self) -> ProcessId {
        ProcessId((self.0 >> PID_SHIFT) as u8)
    }

    pub fn page_number(self) -> u64 {
        (self.0 >> PAGE_SHIFT) & PAGE_NUMBER_MASK
    }

    pub fn offset(self) -> usize {
        (self.0 & OFFSET_MASK) as usize
    }

    pub fn page(self) -> VirtualPage {
        VirtualPage(self.0 >> PAGE_SHIFT)
    }

    /// Adds a byte offset, failing if the result leaves the address space.
    pub fn checked_add(self, bytes: u64) -> Option<VirtualAddress> {
        let raw = self.0.checked_add(bytes)?;
        (raw >> ADDRESS_BITS == 0).then_some(VirtualAddress(raw))
    }
}

impl TryFrom<u64> for VirtualAddress {
    type Error = AddressError;
    fn try_from(raw: u64) -> Result<Self, Self::Error> {
        VirtualAddress::from_raw(raw)
    }
}

impl Serialize for VirtualAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.0)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#014x}", self.0)
    }
}

/// A virtual page: an address with the offset bits dropped. The pid prefix
/// is part of the page identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualPage(u64);

impl VirtualPage {
    pub fn new(pid: ProcessId, page_number: u64) -> Result<Self, AddressError> {
        VirtualAddress::new(pid, page_number, 0).map(VirtualAddress::page)
    }

    pub fn base(self) -> VirtualAddress {
        VirtualAddress(self.0 << PAGE_SHIFT)
    }

    pub fn at(self, offset: usize) -> VirtualAddress {
        debug_assert!(offset < PAGE_SIZE);
        VirtualAddress((self.0 << PAGE_SHIFT) | offset as u64)
    }

    pub fn pid(self) -> ProcessId {
        self.base().pid()
    }

    pub fn number(self) -> u64 {
        self.base().page_number()
    }
}

impl Serialize for VirtualPage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.base().serialize(s)
    }
}

impl fmt::Display for VirtualPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#x}", self.pid(), self.number())
    }
}

/// A physical frame on a specific memory element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId {
    pub element: MemId,
    pub index: u32,
}

impl FrameId {
    pub const fn new(element: MemId, index: u32) -> Self {
        FrameId { element, index }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.element, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
}

impl Perms {
    pub const NONE: Perms = Perms { read: false, write: false };
    pub const READ: Perms = Perms { read: true, write: false };
    pub const READ_WRITE: Perms = Perms { read: true, write: true };

    pub fn allows(self, op: AccessKind) -> bool {
        match op {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
        }
    }

    pub fn is_none(self) -> bool {
        !self.read && !self.write
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}
