#pragma once

#include <cstddef>
#include <string>

namespace hotm {

// Incremental SHA-256, hex-encoded.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* bytes, size_t count);
    std::string hex();  // finalizes; further updates are invalid

private:
    void* ctx_;
};

std::string sha256_hex(const void* bytes, size_t count);

}  // namespace hotm
