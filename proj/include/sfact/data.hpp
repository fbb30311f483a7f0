#pragma once

// Synthetic long-sequence tasks and square-matrix ingestion.

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sfact/dense.hpp"
#include "sfact/error.hpp"
#include "sfact/rng.hpp"

namespace sfact {

enum class TaskKind { adding, temporal_order };

inline std::string to_string(TaskKind t) { return t == TaskKind::adding ? "adding" : "temporal_order"; }

inline TaskKind task_from_string(const std::string& s) {
  if (s == "adding") return TaskKind::adding;
  if (s == "temporal_order" || s == "order") return TaskKind::temporal_order;
  throw ParseError("unknown task '" + s + "'");
}

// ---------------------------------------------------------------------------
// Adding problem

struct AddingInstance {
  std::vector<double> a;       // in (-1, 1)
  std::vector<std::uint8_t> b;  // exactly two ones
  double y = 0.0;
};

/// 0.5 + (a_t1 + a_t2) / 4 over the two flagged positions.
inline double adding_target(const std::vector<double>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw InvalidInput("adding_target: a and b differ in length");
  double sum = 0.0;
  int flags = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] > 1) throw InvalidInput("adding_target: flags must be 0 or 1");
    if (b[i] == 1) {
      sum += a[i];
      ++flags;
    }
  }
  if (flags != 2) throw InvalidInput("adding_target: expected exactly two flagged positions");
  return 0.5 + sum / 4.0;
}

inline std::vector<AddingInstance> gen_adding(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (n < 2) throw InvalidDimension("gen_adding: n must be >= 2");
  Rng rng(seed);
  std::vector<AddingInstance> out(count);
  for (auto& inst : out) {
    inst.a.resize(n);
    inst.b.assign(n, 0);
    for (auto& v : inst.a) {
      do {
        v = rng.uniform(-1.0, 1.0);
      } while (v == -1.0);
    }
    const auto t1 = rng.below(n);
    auto t2 = rng.below(n - 1);
    if (t2 >= t1) ++t2;
    inst.b[t1] = 1;
    inst.b[t2] = 1;
    inst.y = adding_target(inst.a, inst.b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal order

/// Alphabet {a, b, c, d, X, Y}; the first four are noise.
enum Symbol : std::uint8_t { sym_a = 0, sym_b, sym_c, sym_d, sym_X, sym_Y };
inline constexpr std::size_t kOrderVocab = 6;
inline constexpr std::size_t kOrderClasses = 4;

struct OrderInstance {
  std::vector<std::uint8_t> tokens;
  int label = 0;  // (X,X)=0, (X,Y)=1, (Y,X)=2, (Y,Y)=3
};

inline int order_label(const std::vector<std::uint8_t>& tokens) {
  int seen = 0;
  int label = 0;
  for (auto t : tokens) {
    if (t >= kOrderVocab) throw InvalidInput("order_label: token outside vocabulary");
    if (t == sym_X || t == sym_Y) {
      label = label * 2 + (t == sym_Y ? 1 : 0);
      ++seen;
    }
  }
  if (seen != 2) throw InvalidInput("order_label: expected exactly two signal symbols");
  return label;
}

inline std::vector<OrderInstance> gen_temporal_order(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (n < 2) throw InvalidDimension("gen_temporal_order: n must be >= 2");
  Rng rng(seed);
  std::vector<OrderInstance> out(count);
  for (auto& inst : out) {
    inst.tokens.resize(n);
    for (auto& t : inst.tokens) t = static_cast<std::uint8_t>(rng.below(4));
    const auto p1 = rng.below(n);
    auto p2 = rng.below(n - 1);
    if (p2 >= p1) ++p2;
    inst.tokens[p1] = rng.below(2) ? sym_Y : sym_X;
    inst.tokens[p2] = rng.below(2) ? sym_Y : sym_X;
    inst.label = order_label(inst.tokens);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets and their CSV form

struct Dataset {
  TaskKind task = TaskKind::adding;
  std::size_t n = 0;
  std::vector<AddingInstance> adding;
  std::vector<OrderInstance> order;

  std::size_t size() const { return task == TaskKind::adding ? adding.size() : order.size(); }
};

inline Dataset make_dataset(TaskKind task, std::size_t n, std::size_t count, std::uint64_t seed) {
  Dataset ds;
  ds.task = task;
  ds.n = n;
  if (task == TaskKind::adding) {
    ds.adding = gen_adding(n, count, seed);
  } else {
    ds.order = gen_temporal_order(n, count, seed);
  }
  return ds;
}

namespace detail {

inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return {buf.data(), res.ptr};
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
      field.remove_suffix(1);
    }
    out.push_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

inline long long parse_int(std::string_view s, const std::string& where) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(where + ": cannot parse integer '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

/// adding: a_1,b_1,...,a_N,b_N,y per row; temporal_order: N token indices then the label.
inline void write_dataset_csv(const Dataset& ds, std::ostream& out) {
  if (ds.task == TaskKind::adding) {
    for (const auto& inst : ds.adding) {
      for (std::size_t i = 0; i < inst.a.size(); ++i) {
        out << detail::format_double(inst.a[i]) << ',' << int{inst.b[i]} << ',';
      }
      out << detail::format_double(inst.y) << '\n';
    }
  } else {
    for (const auto& inst : ds.order) {
      for (auto t : inst.tokens) out << int{t} << ',';
      out << inst.label << '\n';
    }
  }
}

inline void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_dataset_csv(ds, out);
}

/// Parses a dataset CSV; every row must describe a sequence of the same length.
inline Dataset read_dataset_csv(std::istream& in, TaskKind task, const std::string& name = "dataset") {
  Dataset ds;
  ds.task = task;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const auto f = detail::split_fields(line, ',');
    std::size_t n = 0;
    if (task == TaskKind::adding) {
      if (f.size() < 5 || f.size() % 2 == 0) throw ParseError(where + ": adding rows need 2N+1 fields");
      n = (f.size() - 1) / 2;
    } else {
      if (f.size() < 3) throw ParseError(where + ": temporal_order rows need N+1 fields");
      n = f.size() - 1;
    }
    if (ds.n == 0) ds.n = n;
    if (n != ds.n) {
      throw LengthMismatch(where + ": sequence length " + std::to_string(n) + " differs from " +
                           std::to_string(ds.n));
    }
    if (task == TaskKind::adding) {
      AddingInstance inst;
      inst.a.resize(n);
      inst.b.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        inst.a[i] = detail::parse_double(f[2 * i], where);
        const auto b = detail::parse_int(f[2 * i + 1], where);
        if (b != 0 && b != 1) throw ParseError(where + ": flag must be 0 or 1");
        inst.b[i] = static_cast<std::uint8_t>(b);
      }
      inst.y = detail::parse_double(f[2 * n], where);
      try {
        adding_target(inst.a, inst.b);
      } catch (const InvalidInput& e) {
        throw ParseError(where + ": " + e.what());
      }
      ds.adding.push_back(std::move(inst));
    } else {
      OrderInstance inst;
      inst.tokens.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto t = detail::parse_int(f[i], where);
        if (t < 0 || t >= static_cast<long long>(kOrderVocab)) throw ParseError(where + ": token out of range");
        inst.tokens[i] = static_cast<std::uint8_t>(t);
      }
      const auto label = detail::parse_int(f[n], where);
      if (label < 0 || label >= static_cast<long long>(kOrderClasses)) throw ParseError(where + ": bad label");
      inst.label = static_cast<int>(label);
      ds.order.push_back(std::move(inst));
    }
  }
  return ds;
}

inline Dataset read_dataset_csv(const std::filesystem::path& path, TaskKind task) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return read_dataset_csv(in, task, path.string());
}

// ---------------------------------------------------------------------------
// Square-matrix ingestion

enum class MatrixKind { matrix_market, dense_csv, pgm_image, covariance_of_csv };
enum class MatrixTransform { none, gradient_magnitude };

inline MatrixKind matrix_kind_from_string(const std::string& s) {
  if (s == "matrix_market" || s == "mtx") return MatrixKind::matrix_market;
  if (s == "dense_csv" || s == "csv") return MatrixKind::dense_csv;
  if (s == "pgm_image" || s == "pgm") return MatrixKind::pgm_image;
  if (s == "covariance_of_csv" || s == "covariance") return MatrixKind::covariance_of_csv;
  throw ParseError("unknown matrix kind '" + s + "'");
}

/// Guesses the kind from the file extension (.mtx, .csv, .pgm).
inline MatrixKind matrix_kind_from_path(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".mtx") return MatrixKind::matrix_market;
  if (ext == ".pgm") return MatrixKind::pgm_image;
  if (ext == ".csv") return MatrixKind::dense_csv;
  throw ParseError("cannot infer matrix kind from '" + p.string() + "'");
}

struct MatrixSource {
  MatrixKind kind = MatrixKind::dense_csv;
  std::filesystem::path path;
  MatrixTransform post = MatrixTransform::none;
};

namespace detail {

inline DenseMatrix read_matrix_market(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty file");
  std::istringstream header(line);
  std::string banner, object, format, field, symmetry;
  header >> banner >> object >> format >> field >> symmetry;
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  object = lower(object);
  format = lower(format);
  field = lower(field);
  symmetry = lower(symmetry);
  if (banner != "%%MatrixMarket" || object != "matrix") throw ParseError(name + ": missing MatrixMarket banner");
  if (format != "coordinate" && format != "array") throw ParseError(name + ": unknown format '" + format + "'");
  if (field != "real" && field != "integer" && field != "pattern" && field != "double") {
    throw ParseError(name + ": unsupported field '" + field + "'");
  }
  if (symmetry != "general" && symmetry != "symmetric" && symmetry != "skew-symmetric") {
    throw ParseError(name + ": unsupported symmetry '" + symmetry + "'");
  }
  if (format == "array" && field == "pattern") throw ParseError(name + ": pattern field needs coordinate format");

  auto next_data_line = [&](std::string& out) {
    while (std::getline(in, out)) {
      if (!out.empty() && out[0] == '%') continue;
      if (out.find_first_not_of(" \t\r") == std::string::npos) continue;
      return true;
    }
    return false;
  };
  if (!next_data_line(line)) throw ParseError(name + ": missing size line");
  std::istringstream sizes(line);
  long long rows = 0, cols = 0, entries = 0;
  sizes >> rows >> cols;
  if (format == "coordinate") sizes >> entries;
  if (!sizes || rows <= 0 || cols <= 0) throw ParseError(name + ": bad size line");
  if (rows != cols) throw InvalidInput(name + ": matrix is " + std::to_string(rows) + "x" + std::to_string(cols) + ", not square");

  const auto n = static_cast<std::size_t>(rows);
  DenseMatrix m(n, n);
  const bool sym = symmetry == "symmetric";
  const bool skew = symmetry == "skew-symmetric";
  if (format == "coordinate") {
    for (long long k = 0; k < entries; ++k) {
      if (!next_data_line(line)) throw ParseError(name + ": fewer entries than declared");
      std::istringstream ls(line);
      long long i = 0, j = 0;
      double v = 1.0;
      ls >> i >> j;
      if (field != "pattern") ls >> v;
      if (!ls || i < 1 || j < 1 || i > rows || j > cols) throw ParseError(name + ": bad entry '" + line + "'");
      m(static_cast<std::size_t>(i - 1), static_cast<std::size_t>(j - 1)) += v;
      if ((sym || skew) && i != j) {
        m(static_cast<std::size_t>(j - 1), static_cast<std::size_t>(i - 1)) += skew ? -v : v;
      }
    }
  } else {
    // Column-major; symmetric variants list the lower triangle only.
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = (sym || skew) ? j : 0; i < n; ++i) {
        if (skew && i == j) continue;
        if (!next_data_line(line)) throw ParseError(name + ": fewer values than declared");
        std::istringstream ls(line);
        double v = 0.0;
        ls >> v;
        if (!ls) throw ParseError(name + ": bad value '" + line + "'");
        m(i, j) = v;
        if (sym) m(j, i) = v;
        if (skew) m(j, i) = -v;
      }
    }
  }
  return m;
}

inline std::vector<std::vector<double>> read_numeric_csv(std::istream& in, const std::string& name) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    std::vector<double> row;
    for (auto f : split_fields(line, ',')) row.push_back(parse_double(f, where));
    if (!rows.empty() && row.size() != rows.front().size()) throw ParseError(where + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(name + ": no data");
  return rows;
}

inline DenseMatrix read_pgm(std::istream& in, const std::string& name) {
  auto next_token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    if (tok.empty()) throw ParseError(name + ": truncated PGM header");
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P2" && magic != "P5") throw ParseError(name + ": not a PGM (P2/P5) file");
  const auto width = parse_int(next_token(), name);
  const auto height = parse_int(next_token(), name);
  const auto maxval = parse_int(next_token(), name);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) throw ParseError(name + ": bad PGM header");
  if (width != height) {
    throw InvalidInput(name + ": image is " + std::to_string(width) + "x" + std::to_string(height) + ", not square");
  }
  const auto n = static_cast<std::size_t>(width);
  DenseMatrix m(n, n);
  if (magic == "P2") {
    for (auto& v : m.values()) {
      const auto px = parse_int(next_token(), name);
      if (px < 0 || px > maxval) throw ParseError(name + ": pixel exceeds maxval");
      v = static_cast<double>(px);
    }
  } else {
    // next_token consumed the single whitespace byte after maxval
    const std::size_t bytes = maxval < 256 ? 1 : 2;
    for (auto& v : m.values()) {
      unsigned char buf[2] = {0, 0};
      if (!in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(bytes))) {
        throw ParseError(name + ": truncated PGM raster");
      }
      v = bytes == 1 ? buf[0] : static_cast<double>((buf[0] << 8) | buf[1]);
    }
  }
  return m;
}

}  // namespace detail

/// Mean-centred covariance of the columns, normalized by the number of rows.
inline DenseMatrix covariance(const std::vector<std::vector<double>>& observations) {
  if (observations.empty()) throw InvalidInput("covariance: no observations");
  const std::size_t dims = observations.front().size();
  const double count = static_cast<double>(observations.size());
  std::vector<double> mean(dims, 0.0);
  for (const auto& o : observations)
    for (std::size_t j = 0; j < dims; ++j) mean[j] += o[j];
  for (auto& v : mean) v /= count;
  DenseMatrix cov(dims, dims);
  for (const auto& o : observations)
    for (std::size_t i = 0; i < dims; ++i)
      for (std::size_t j = 0; j < dims; ++j) cov(i, j) += (o[i] - mean[i]) * (o[j] - mean[j]);
  for (auto& v : cov.values()) v /= count;
  return cov;
}

/// Per-pixel sqrt(gx^2 + gy^2): central differences inside, one-sided at the borders.
inline DenseMatrix gradient_magnitude(const DenseMatrix& img) {
  const std::size_t rows = img.rows();
  const std::size_t cols = img.cols();
  DenseMatrix out(rows, cols);
  auto diff = [](double lo, double hi, double span) { return (hi - lo) / span; };
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double gx = 0.0, gy = 0.0;
      if (cols > 1) {
        if (c == 0) {
          gx = diff(img(r, 0), img(r, 1), 1.0);
        } else if (c + 1 == cols) {
          gx = diff(img(r, c - 1), img(r, c), 1.0);
        } else {
          gx = diff(img(r, c - 1), img(r, c + 1), 2.0);
        }
      }
      if (rows > 1) {
        if (r == 0) {
          gy = diff(img(0, c), img(1, c), 1.0);
        } else if (r + 1 == rows) {
          gy = diff(img(r - 1, c), img(r, c), 1.0);
        } else {
          gy = diff(img(r - 1, c), img(r + 1, c), 2.0);
        }
      }
      out(r, c) = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

inline DenseMatrix load_matrix(const MatrixSource& src) {
  const bool binary = src.kind == MatrixKind::pgm_image;
  std::ifstream in(src.path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw ParseError("cannot open " + src.path.string());
  const std::string name = src.path.string();
  DenseMatrix m;
  switch (src.kind) {
    case MatrixKind::matrix_market:
      m = detail::read_matrix_market(in, name);
      break;
    case MatrixKind::pgm_image:
      m = detail::read_pgm(in, name);
      break;
    case MatrixKind::dense_csv: {
      auto rows = detail::read_numeric_csv(in, name);
      if (rows.size() != rows.front().size()) {
        throw InvalidInput(name + ": matrix is " + std::to_string(rows.size()) + "x" +
                           std::to_string(rows.front().size()) + ", not square");
      }
      m = DenseMatrix(rows.size(), rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows.size(); ++j) m(i, j) = rows[i][j];
      break;
    }
    case MatrixKind::covariance_of_csv:
      m = covariance(detail::read_numeric_csv(in, name));
      break;
  }
  if (!m.all_finite()) throw ParseError(name + ": non-finite values");
  if (src.post == MatrixTransform::gradient_magnitude) m = gradient_magnitude(m);
  return m;
}

}  // namespace sfact
