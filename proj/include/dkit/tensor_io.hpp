#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dkit/numerics.hpp"

namespace dkit {

/// DKT1 tensor file: magic "DKT1", u32 LE rank, rank dims (u32 LE each),
/// row-major float32 LE payload. Used for dataset sample tensors.
void write_dkt1(std::ostream& os, const std::vector<uint32_t>& dims,
                const std::vector<float>& payload);
void write_dkt1_matrix(const std::string& path, const Matrix& m);

struct Dkt1Tensor {
  std::vector<uint32_t> dims;
  std::vector<float> payload;
};
Dkt1Tensor read_dkt1(std::istream& is);
Matrix read_dkt1_matrix(const std::string& path);

/// DKT8: same container layout with a float64 payload. Checkpoints store
/// parameters this way so a save/load round trip is bit-identical.
void write_dkt8(std::ostream& os, const Matrix& m);
Matrix read_dkt8(std::istream& is);

// little-endian scalar helpers shared by the file formats
void write_u32(std::ostream& os, uint32_t v);
uint32_t read_u32(std::istream& is);
void write_u64(std::ostream& os, uint64_t v);
uint64_t read_u64(std::istream& is);
void write_f64(std::ostream& os, double v);
double read_f64(std::istream& is);
void write_bytes(std::ostream& os, const std::string& s);
std::string read_bytes(std::istream& is);

}  // namespace dkit
