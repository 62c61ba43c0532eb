"""Independent reference computations for the tests.

Everything here is written directly against hashlib/hmac/struct with the
constants spelled out, so a shared mistake in the package encoders would
show up as a mismatch instead of cancelling out.
"""

import hashlib
import hmac
import struct

ZERO = bytes(32)
CC = {
    "PolicyNV": 0x149,
    "PolicyPCR": 0x17F,
    "PolicyAuthorize": 0x16A,
    "PolicySigned": 0x160,
    "PolicyCommandCode": 0x16C,
    "NV_UndefineSpaceSpecial": 0x11F,
    "PCR_Extend": 0x182,
    "NV_Extend": 0x136,
}
PLATFORM = 0x4000000C


def h(*parts: bytes) -> bytes:
    d = hashlib.sha256()
    for p in parts:
        d.update(p)
    return d.digest()


def be32(x: int) -> bytes:
    return struct.pack(">I", x)


def be16(x: int) -> bytes:
    return struct.pack(">H", x)


def extend_chain(values) -> bytes:
    acc = ZERO
    for v in values:
        acc = h(acc, v)
    return acc


def policy_fold(nv_entries, pcr_entries) -> bytes:
    """nv_entries: [(value, name)] in attach order; pcr_entries: {index: value}."""
    acc = ZERO
    for value, name in nv_entries:
        acc = h(acc, be32(CC["PolicyNV"]), h(value, b"\x00\x00", b"\x00\x00"), name)
    if pcr_entries:
        idx = sorted(pcr_entries)
        sel = bytes([len(idx)]) + b"".join(be32(i) for i in idx)
        acc = h(acc, be32(CC["PolicyPCR"]), sel, h(b"".join(pcr_entries[i] for i in idx)))
    return acc


def authorize_fold(signer_name: bytes) -> bytes:
    return h(h(ZERO, be32(CC["PolicyAuthorize"]), signer_name))


def audit_pcr(idx: int, digest: bytes) -> bytes:
    cp = h(be32(CC["PCR_Extend"]), be32(idx), be32(idx), be16(0x000B), digest)
    rp = h(be32(0), be32(CC["PCR_Extend"]))
    return h(ZERO, cp, rp)


def audit_nv(name: bytes, digest: bytes) -> bytes:
    cp = h(be32(CC["NV_Extend"]), name, name, be16(len(digest)), digest)
    rp = h(be32(0), be32(CC["NV_Extend"]))
    return h(ZERO, cp, rp)


def deletion_cp(name: bytes) -> bytes:
    return h(be32(CC["NV_UndefineSpaceSpecial"]), name, be32(PLATFORM))


def hmac256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()
