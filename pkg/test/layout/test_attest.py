import unittest

import numpy as np

from fastio.layout import AttestationStatus, attest_driver, code_digest
from fastio.machine import assemble_driver

PPT_CR3 = 0x123000
STACK_TOP = 0x605000


class AttestDriverTest(unittest.TestCase):
    def setUp(self) -> None:
        self.image = assemble_driver(PPT_CR3, STACK_TOP)

    def attest(self, pages, certificate=None, **kwargs):
        certificate = certificate if certificate is not None else self.image.certificate()
        return attest_driver(pages, certificate, allowed_sites=self.image.load_sites, **kwargs)

    def test_clean_driver_trusted(self) -> None:
        result = self.attest(self.image.code_pages)
        self.assertTrue(result.trusted)
        self.assertEqual(result.reason, "")
        self.assertEqual(result.predicate_sites, (10, 26))

    def test_single_byte_perturbations_rejected(self) -> None:
        rng = np.random.RandomState(0)
        rejected = 0
        for _ in range(100):
            code = bytearray(self.image.code)
            offset = int(rng.randint(len(code)))
            code[offset] ^= int(rng.randint(1, 256))
            result = self.attest([bytes(code)])
            rejected += result.status is AttestationStatus.REJECTED
        self.assertEqual(rejected, 100)

    def test_third_occurrence_rejected(self) -> None:
        code = bytearray(self.image.code)
        code[100:103] = bytes([0x0F, 0x20, 0xD8])
        result = attest_driver([bytes(code)], code_digest([bytes(code)]), allowed_sites=self.image.load_sites)
        self.assertFalse(result.trusted)
        self.assertIn("only entry and exit", result.reason)
        self.assertEqual(result.predicate_sites, (10, 26, 100))

    def test_two_occurrences_without_sites(self) -> None:
        result = attest_driver(self.image.code_pages, self.image.certificate())
        self.assertTrue(result.trusted)

    def test_sha1_certificates(self) -> None:
        certificate = self.image.certificate("sha1")
        self.assertEqual(len(certificate), 40)
        self.assertTrue(self.attest(self.image.code_pages, certificate, algorithm="sha1").trusted)
        self.assertFalse(self.attest(self.image.code_pages, certificate).trusted)

    def test_digest_mismatch_reason(self) -> None:
        result = self.attest(self.image.code_pages, "00" * 32)
        self.assertIn("digest mismatch", result.reason)


if __name__ == "__main__":
    unittest.main()
