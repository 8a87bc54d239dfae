#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace iomm {

// Incremental SHA-256 (FIPS 180-4). Used for frozen-parameter digests and
// canonical config digests.
class Sha256 {
  public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, size_t len);
    std::array<uint8_t, 32> finish();

  private:
    void process_block(const uint8_t* block);

    std::array<uint32_t, 8> state_{};
    std::array<uint8_t, 64> buffer_{};
    uint64_t total_len_ = 0;
    size_t buffer_len_ = 0;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

}  // namespace iomm
