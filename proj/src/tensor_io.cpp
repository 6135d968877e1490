#include "sparsedit/tensor_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace sparsedit {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'D', 'T', 'N'};

void write_header(std::ostream& os, DType dtype, std::uint64_t rows, std::uint64_t cols) {
  os.write(kMagic, 4);
  const std::uint8_t meta[4] = {1, static_cast<std::uint8_t>(dtype), 0, 0};
  os.write(reinterpret_cast<const char*>(meta), 4);
  os.write(reinterpret_cast<const char*>(&rows), 8);
  os.write(reinterpret_cast<const char*>(&cols), 8);
}

}  // namespace

void write_tensor(std::ostream& os, const MatrixXd& m, DType dtype) {
  write_header(os, dtype, static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols()));
  if (dtype == DType::kFloat64) {
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
  } else {
    const MatrixXf f = m.cast<float>();
    os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
  }
  if (!os) throw std::runtime_error("write_tensor: stream error");
}

void write_tensor(std::ostream& os, const MatrixXf& m) {
  write_header(os, DType::kFloat32, static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 4));
  if (!os) throw std::runtime_error("write_tensor: stream error");
}

MatrixXd read_tensor(std::istream& is) {
  char magic[4];
  std::uint8_t meta[4];
  std::uint64_t rows = 0, cols = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(meta), 4);
  is.read(reinterpret_cast<char*>(&rows), 8);
  is.read(reinterpret_cast<char*>(&cols), 8);
  require(static_cast<bool>(is) && std::memcmp(magic, kMagic, 4) == 0, "read_tensor: bad header");
  require(meta[0] == 1, "read_tensor: unsupported version");
  require(rows < (1ull << 32) && cols < (1ull << 32), "read_tensor: implausible shape");
  MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  if (meta[1] == static_cast<std::uint8_t>(DType::kFloat64)) {
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
  } else if (meta[1] == static_cast<std::uint8_t>(DType::kFloat32)) {
    MatrixXf f(m.rows(), m.cols());
    is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
    m = f.cast<double>();
  } else {
    throw InvalidInput("read_tensor: unknown dtype");
  }
  require(static_cast<bool>(is), "read_tensor: truncated payload");
  return m;
}

void save_tensor(const std::string& path, const MatrixXd& m, DType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
  write_tensor(os, m, dtype);
}

MatrixXd load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
  return read_tensor(is);
}

void write_tensor_csv(std::ostream& os, const MatrixXd& m) {
  char buf[32];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) os << ',';
      auto res = std::to_chars(buf, buf + sizeof buf, m(r, c));
      os.write(buf, res.ptr - buf);
    }
    os << '\n';
  }
}

MatrixXd read_tensor_csv(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      require(res.ec == std::errc(), "read_tensor_csv: bad number '" + cell + "'");
      row.push_back(v);
    }
    require(rows.empty() || row.size() == rows.front().size(), "read_tensor_csv: ragged rows");
    rows.push_back(std::move(row));
  }
  MatrixXd m(static_cast<Eigen::Index>(rows.size()),
             rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return m;
}

}  // namespace sparsedit
