import pytest

import oracles
from blindtrust.crypto import CommandCode, SigningKeyPair, sha256
from blindtrust.orchestrator import nv_deletion_policy
from blindtrust.vtpm import (
    ATTESTATION_KEY_ATTRS,
    ENDORSEMENT_KEY_ATTRS,
    MAX_SESSIONS,
    NVPCR_ATTRS,
    KeyPublic,
    NvTemplate,
    ObjectBlob,
    Ticket,
    TpmError,
    VTpm,
    decode_attest,
)

NV = 0x01000010
D1, D2 = sha256(b"one"), sha256(b"two")


@pytest.fixture
def tpm():
    return VTpm(seed=b"unit")


def _code(exc_info):
    return exc_info.value.code


def external_key(tpm, seed=b"ext"):
    key = SigningKeyPair.from_seed(seed)
    handle, name = tpm.load_external(KeyPublic(ENDORSEMENT_KEY_ATTRS, bytes(32), key.public).encode())
    return key, handle, name


def test_pcr_extend_matches_hash_chain(tpm):
    tpm.pcr_extend(3, D1)
    tpm.pcr_extend(3, D2)
    assert tpm.pcr_read(3) == oracles.extend_chain([D1, D2])
    assert tpm.pcr_read(4) == bytes(32)


def test_pcr_extend_rejects_bad_input(tpm):
    with pytest.raises(TpmError) as e:
        tpm.pcr_extend(24, D1)
    assert _code(e) == "bad-index"
    with pytest.raises(ValueError):
        tpm.pcr_extend(1, b"short")


def test_nv_lifecycle(tpm):
    tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    with pytest.raises(TpmError) as e:
        tpm.nv_read(NV)
    assert _code(e) == "nv-unwritten"
    tpm.nv_extend(NV, D1)
    assert tpm.nv_read(NV) == oracles.h(bytes(32), D1)
    with pytest.raises(TpmError) as e:
        tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    assert _code(e) == "index-collision"
    with pytest.raises(TpmError) as e:
        tpm.nv_extend(NV + 1, D1)
    assert _code(e) == "nv-undefined"


def test_nv_certify_requires_written_index(tpm):
    ek = tpm.create_primary("endorsement")
    tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    with pytest.raises(TpmError) as e:
        tpm.nv_certify(NV, ek)
    assert _code(e) == "nv-unwritten"
    tpm.nv_extend(NV, bytes(32))
    info, sig = tpm.nv_certify(NV, ek)
    cert = decode_attest(info)
    assert cert.nv_contents == oracles.h(bytes(32), bytes(32))
    assert cert.obj_name == tpm.name_of(NV)


def test_audit_digest_pcr_and_nv(tpm):
    ek = tpm.create_primary("endorsement")
    s, _ = tpm.start_auth_session("HMAC")
    tpm.pcr_extend(7, D1, audit_session=s)
    info, _ = tpm.get_session_audit_digest(ek, s)
    assert decode_attest(info).h_session == oracles.audit_pcr(7, D1)

    tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    tpm.nv_extend(NV, bytes(32))
    name = tpm.name_of(NV)
    s2, _ = tpm.start_auth_session("HMAC")
    tpm.nv_extend(NV, D2, audit_session=s2)
    info, _ = tpm.get_session_audit_digest(ek, s2)
    assert decode_attest(info).h_session == oracles.audit_nv(name, D2)


def test_first_nv_extend_audits_the_unwritten_name(tpm):
    ek = tpm.create_primary("endorsement")
    tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    unwritten = tpm.name_of(NV)
    s, _ = tpm.start_auth_session("HMAC")
    tpm.nv_extend(NV, D1, audit_session=s)
    assert tpm.name_of(NV) != unwritten
    info, _ = tpm.get_session_audit_digest(ek, s)
    assert decode_attest(info).h_session == oracles.audit_nv(unwritten, D1)


def test_audit_requires_hmac_session(tpm):
    p, _ = tpm.start_auth_session("POLICY")
    with pytest.raises(TpmError) as e:
        tpm.pcr_extend(1, D1, audit_session=p)
    assert _code(e) == "wrong-session-kind"


def test_policy_nv_and_pcr_fold(tpm):
    tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    tpm.nv_extend(NV, D1)
    tpm.pcr_extend(2, D1)
    tpm.pcr_extend(9, D2)
    s, _ = tpm.start_auth_session("POLICY")
    tpm.policy_nv(s, NV, tpm.nv_read(NV))
    tpm.policy_pcr(s, [2, 9])
    expected = oracles.policy_fold([(tpm.nv_read(NV), tpm.name_of(NV))],
                                   {2: tpm.pcr_read(2), 9: tpm.pcr_read(9)})
    assert tpm.session_state(s).policy_digest == expected


def test_policy_nv_mismatch_and_selection_order(tpm):
    tpm.nv_define_space(NV, NvTemplate(), bytes(32))
    tpm.nv_extend(NV, D1)
    s, _ = tpm.start_auth_session("POLICY")
    with pytest.raises(TpmError) as e:
        tpm.policy_nv(s, NV, D1)
    assert _code(e) == "nv-mismatch"
    with pytest.raises(TpmError) as e:
        tpm.policy_pcr(s, [9, 2])
    assert _code(e) == "bad-selection"


def test_policy_authorize_needs_matching_ticket(tpm):
    key, handle, name = external_key(tpm)
    s, _ = tpm.start_auth_session("POLICY")
    approved = tpm.session_state(s).policy_digest
    ticket = tpm.verify_signature(handle, sha256(approved), key.sign(sha256(approved)))
    forged = Ticket(ticket.tag, bytes(32))
    with pytest.raises(TpmError) as e:
        tpm.policy_authorize(s, approved, forged, name)
    assert _code(e) == "ticket-mismatch"
    with pytest.raises(TpmError) as e:
        tpm.policy_authorize(s, sha256(b"other"), ticket, name)
    assert _code(e) == "policy-mismatch"
    tpm.policy_authorize(s, approved, ticket, name)
    assert tpm.session_state(s).policy_digest == oracles.authorize_fold(name)


def test_ticket_from_another_tpm_is_useless(tpm):
    other = VTpm(seed=b"other")
    key, h_other, name = external_key(other)
    _, h_mine, _ = external_key(tpm)
    ticket = other.verify_signature(h_other, sha256(bytes(32)), key.sign(sha256(bytes(32))))
    s, _ = tpm.start_auth_session("POLICY")
    with pytest.raises(TpmError) as e:
        tpm.policy_authorize(s, bytes(32), ticket, name)
    assert _code(e) == "ticket-mismatch"


def test_verify_signature_rejects_bad_signature(tpm):
    key, handle, _ = external_key(tpm)
    with pytest.raises(TpmError) as e:
        tpm.verify_signature(handle, sha256(b"x"), key.sign(sha256(b"y")))
    assert _code(e) == "bad-signature"


def test_policy_signed_binds_nonce_and_cp_hash(tpm):
    key, handle, name = external_key(tpm)
    s, nonce = tpm.start_auth_session("POLICY")
    cp = sha256(b"cp")
    with pytest.raises(TpmError) as e:
        tpm.policy_signed(s, handle, key.sign(sha256(bytes(16) + bytes(4) + cp)), cp)
    assert _code(e) == "bad-signature"
    tpm.policy_signed(s, handle, key.sign(oracles.h(nonce, oracles.be32(0), cp)), cp)
    state = tpm.session_state(s)
    assert state.cp_hash == cp
    assert state.policy_digest == oracles.h(oracles.h(bytes(32), oracles.be32(0x160), name))


def test_policy_command_code_locks(tpm):
    s, _ = tpm.start_auth_session("POLICY")
    tpm.policy_command_code(s, CommandCode.Sign)
    with pytest.raises(TpmError) as e:
        tpm.policy_command_code(s, CommandCode.NV_UndefineSpaceSpecial)
    assert _code(e) == "command-code-mismatch"


def _deletable_nv(tpm, signer_name):
    tpm.nv_define_space(NV, NvTemplate(NVPCR_ATTRS), nv_deletion_policy(signer_name))
    tpm.nv_extend(NV, bytes(32))


def test_undefine_special_error_order(tpm):
    key, handle, name = external_key(tpm)
    _deletable_nv(tpm, name)
    hmac_s, _ = tpm.start_auth_session("HMAC")
    with pytest.raises(TpmError) as e:
        tpm.nv_undefine_space_special(NV, hmac_s)
    assert _code(e) == "policy-unsatisfied"
    s, _ = tpm.start_auth_session("POLICY")
    with pytest.raises(TpmError) as e:
        tpm.nv_undefine_space_special(NV, s)
    assert _code(e) == "command-code-mismatch"
    tpm.policy_command_code(s, CommandCode.NV_UndefineSpaceSpecial)
    with pytest.raises(TpmError) as e:
        tpm.nv_undefine_space_special(NV, s)
    assert _code(e) == "cp-hash-mismatch"
    assert NV in tpm.nv_store


def test_undefine_special_full_flow(tpm):
    key, handle, name = external_key(tpm)
    _deletable_nv(tpm, name)
    s, nonce = tpm.start_auth_session("POLICY")
    cp = oracles.deletion_cp(tpm.name_of(NV))
    signed_pol = oracles.h(oracles.h(bytes(32), oracles.be32(0x160), name))
    ticket = tpm.verify_signature(handle, sha256(signed_pol), key.sign(sha256(signed_pol)))
    tpm.policy_signed(s, handle, key.sign(oracles.h(nonce, oracles.be32(0), cp)), cp)
    tpm.policy_authorize(s, signed_pol, ticket, name)
    tpm.policy_command_code(s, CommandCode.NV_UndefineSpaceSpecial)
    assert tpm.session_state(s).policy_digest == nv_deletion_policy(name)
    tpm.nv_undefine_space_special(NV, s)
    assert NV not in tpm.nv_store
    assert s not in tpm.sessions


def test_restricted_key_refuses_external_data(tpm):
    ek = tpm.create_primary("endorsement")
    with pytest.raises(TpmError) as e:
        tpm.sign(ek, b"anything")
    assert _code(e) == "restricted-key-refusal"


def test_create_load_certify(tpm):
    sk = tpm.create_primary("storage")
    ek = tpm.create_primary("endorsement")
    policy = sha256(b"policy")
    blob, creation_hash, ticket = tpm.create(sk, ATTESTATION_KEY_ATTRS, policy)
    ak, name = tpm.load(sk, blob)
    info, sig = tpm.certify_creation(ak, ek, creation_hash, ticket)
    cert = decode_attest(info)
    assert cert.obj_name == name and cert.auth_policy == policy
    with pytest.raises(TpmError) as e:
        tpm.certify_creation(ak, ek, sha256(b"other"), ticket)
    assert _code(e) == "ticket-mismatch"
    with pytest.raises(TpmError) as e:
        tpm.sign(ak, b"nonce")
    assert _code(e) == "policy-unsatisfied"


def test_load_checks_parent_and_integrity(tpm):
    sk = tpm.create_primary("storage")
    ek = tpm.create_primary("endorsement")
    blob, _, _ = tpm.create(sk, ATTESTATION_KEY_ATTRS, bytes(32))
    with pytest.raises(TpmError) as e:
        tpm.load(ek, blob)
    assert _code(e) == "bad-parent"
    bad = ObjectBlob(blob.public, bytes([blob.sealed[0] ^ 1]) + blob.sealed[1:], blob.integrity)
    with pytest.raises(TpmError) as e:
        tpm.load(sk, bad)
    assert _code(e) == "wrong-parent"
    other = VTpm(seed=b"elsewhere")
    with pytest.raises(TpmError) as e:
        other.load(other.create_primary("storage"), blob)
    assert _code(e) == "wrong-parent"


def test_sealed_blob_does_not_reveal_key(tpm):
    sk = tpm.create_primary("storage")
    blob, _, _ = tpm.create(sk, ATTESTATION_KEY_ATTRS, bytes(32))
    handle, _ = tpm.load(sk, blob)
    assert tpm.objects[handle].secret.secret not in blob.sealed + blob.integrity + blob.public


def test_session_slots_are_bounded(tpm):
    for _ in range(MAX_SESSIONS):
        tpm.start_auth_session("HMAC")
    with pytest.raises(TpmError) as e:
        tpm.start_auth_session("POLICY")
    assert _code(e) == "session-slots-exhausted"


def test_flush_unknown_handle(tpm):
    with pytest.raises(TpmError) as e:
        tpm.flush_context(0x80FFFFFF)
    assert _code(e) == "unknown-handle"


def test_dump_has_no_secrets(tpm):
    tpm.create_primary("storage")
    tpm.pcr_extend(1, D1)
    text = repr(tpm.dump())
    for secret in tpm.secret_material():
        assert secret.hex() not in text


def test_decode_attest_rejects_garbage():
    with pytest.raises(ValueError):
        decode_attest(b"\x00\x04abcd")
    with pytest.raises(ValueError):
        decode_attest(b"\xff")
