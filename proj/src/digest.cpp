#include "hotm/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

#include "hotm/errors.hpp"

namespace hotm {

Sha256::Sha256() {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        throw Error("failed to initialize SHA-256");
    }
    ctx_ = ctx;
}

Sha256::~Sha256() {
    if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
}

void Sha256::update(const void* bytes, size_t count) {
    if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes, count) != 1) {
        throw Error("SHA-256 update failed");
    }
}

std::string Sha256::hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), digest.data(), &len) != 1) {
        throw Error("SHA-256 finalize failed");
    }
    std::string out(2 * len, '0');
    static const char* hexdigits = "0123456789abcdef";
    for (unsigned int i = 0; i < len; ++i) {
        out[2 * i] = hexdigits[digest[i] >> 4];
        out[2 * i + 1] = hexdigits[digest[i] & 0xf];
    }
    return out;
}

std::string sha256_hex(const void* bytes, size_t count) {
    Sha256 h;
    h.update(bytes, count);
    return h.hex();
}

}  // namespace hotm
