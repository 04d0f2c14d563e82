#include "dkit/tensor_io.hpp"

#include <cstring>
#include <fstream>

namespace dkit {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("unexpected end of file reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_u32(std::ostream& os, uint32_t v) { put_u32(os, v); }
uint32_t read_u32(std::istream& is) { return get_u32(is); }

void write_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v & 0xffffffffULL));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint64_t read_u64(std::istream& is) {
  uint64_t lo = get_u32(is);
  uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_bytes(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_bytes(std::istream& is) {
  uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw FormatError("unexpected end of file reading byte section");
  return s;
}

void write_dkt1(std::ostream& os, const std::vector<uint32_t>& dims,
                const std::vector<float>& payload) {
  size_t n = 1;
  for (uint32_t d : dims) n *= d;
  if (n != payload.size()) throw ShapeMismatchError("write_dkt1: payload size mismatch");
  os.write("DKT1", 4);
  put_u32(os, static_cast<uint32_t>(dims.size()));
  for (uint32_t d : dims) put_u32(os, d);
  for (float f : payload) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
  }
}

void write_dkt1_matrix(const std::string& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  std::vector<float> payload(m.data.begin(), m.data.end());
  write_dkt1(os, {static_cast<uint32_t>(m.rows), static_cast<uint32_t>(m.cols)}, payload);
  if (!os) throw IoError("write failed: " + path);
}

Dkt1Tensor read_dkt1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DKT1", 4) != 0)
    throw FormatError("read_dkt1: bad magic (expected DKT1)");
  uint32_t rank = get_u32(is);
  if (rank > 8) throw FormatError("read_dkt1: implausible rank");
  Dkt1Tensor t;
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    t.dims.push_back(get_u32(is));
    n *= t.dims.back();
  }
  t.payload.resize(n);
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    t.payload[i] = f;
  }
  return t;
}

Matrix read_dkt1_matrix(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  Dkt1Tensor t = read_dkt1(is);
  if (t.dims.size() != 2) throw FormatError("read_dkt1_matrix: expected rank 2");
  Matrix m(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
  for (int i = 0; i < m.size(); ++i) m.data[i] = t.payload[i];
  return m;
}

void write_dkt8(std::ostream& os, const Matrix& m) {
  os.write("DKT8", 4);
  put_u32(os, 2);
  put_u32(os, static_cast<uint32_t>(m.rows));
  put_u32(os, static_cast<uint32_t>(m.cols));
  for (double v : m.data) write_f64(os, v);
}

Matrix read_dkt8(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DKT8", 4) != 0)
    throw FormatError("read_dkt8: bad magic (expected DKT8)");
  uint32_t rank = get_u32(is);
  if (rank != 2) throw FormatError("read_dkt8: expected rank 2");
  uint32_t rows = get_u32(is);
  uint32_t cols = get_u32(is);
  Matrix m(static_cast<int>(rows), static_cast<int>(cols));
  for (int i = 0; i < m.size(); ++i) m.data[i] = read_f64(is);
  return m;
}

}  // namespace dkit
