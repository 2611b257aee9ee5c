#include "apmpc/io.hpp"

#include "apmpc/error.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace apmpc {

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) throw FormatError("cannot format double");
  return std::string(buf, end);
}

double parse_double(std::string_view text) {
  text = trim(text);
  double value = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw FormatError("not a number: '" + std::string(text) + "'");
  }
  return value;
}

long long parse_int(std::string_view text) {
  text = trim(text);
  long long value = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw FormatError("not an integer: '" + std::string(text) + "'");
  }
  return value;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      return out;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw FormatError("missing CSV column '" + std::string(name) + "'");
}

std::vector<double> CsvTable::column_values(std::string_view name) const {
  const auto c = column(name);
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& row : rows) out.push_back(row[c]);
  return out;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty CSV " + path.string());
  for (auto& h : split(trim(line), ',')) table.header.emplace_back(trim(h));
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split(trim(line), ',');
    if (cells.size() != table.header.size()) {
      throw FormatError("ragged row in " + path.string());
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) row.push_back(parse_double(c));
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::string text;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) text += ',';
    text += header[i];
  }
  text += '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) text += ',';
      text += format_double(row[i]);
    }
    text += '\n';
  }
  write_text(path, text);
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const Eigen::MatrixXd& TensorStore::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("missing tensor '" + name + "'");
  return it->second;
}

const std::string& TensorStore::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("missing metadata '" + key + "'");
  return it->second;
}

void TensorStore::write(std::ostream& out) const {
  out << "apmpc-tensors v" << kVersion << '\n';
  for (const auto& [k, v] : meta) out << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, m] : tensors) {
    out << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) out << ' ';
        out << format_double(m(r, c));
      }
      out << '\n';
    }
  }
}

TensorStore TensorStore::read(std::istream& in) {
  TensorStore store;
  std::string line;
  if (!std::getline(in, line) || trim(line) != "apmpc-tensors v1") {
    throw FormatError("unsupported tensor container header");
  }
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream head(line);
    std::string kind;
    head >> kind;
    if (kind == "meta") {
      std::string key, value;
      head >> key;
      std::getline(head, value);
      store.meta[key] = std::string(trim(value));
    } else if (kind == "tensor") {
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      if (!(head >> name >> rows >> cols) || rows < 0 || cols < 0) {
        throw FormatError("bad tensor header: " + line);
      }
      Eigen::MatrixXd m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) throw FormatError("truncated tensor " + name);
        const auto cells = split(trim(line), ' ');
        if (cols > 0 && static_cast<Eigen::Index>(cells.size()) != cols) {
          throw FormatError("row width mismatch in tensor " + name);
        }
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = parse_double(cells[c]);
      }
      if (!store.tensors.emplace(name, std::move(m)).second) {
        throw FormatError("duplicate tensor " + name);
      }
    } else {
      throw FormatError("unexpected line in tensor container: " + line);
    }
  }
  return store;
}

void TensorStore::save(const std::filesystem::path& path) const {
  std::ostringstream ss;
  write(ss);
  write_text(path, ss.str());
}

TensorStore TensorStore::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return read(in);
}

}  // namespace apmpc
