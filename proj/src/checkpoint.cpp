#include "gprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace gprune {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size()) throw Error("bad integer list: " + s);
    out.push_back(v);
  }
  return out;
}

std::string hex_bytes(const std::string& s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char ch : s) {
    out += digits[ch >> 4];
    out += digits[ch & 15];
  }
  return out;
}

std::string unhex_bytes(const std::string& s) {
  if (s.size() % 2) throw Error("odd-length hex string");
  auto val = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw Error("bad hex digit");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); i += 2) out += static_cast<char>(val(s[i]) * 16 + val(s[i + 1]));
  return out;
}

struct TensorEntry {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  std::size_t offset;
};

}  // namespace

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string checkpoint_serialize(const ModelBundle& bundle) {
  const ModelWeights& w = bundle.weights;
  const ModelConfig& c = w.config;
  std::vector<std::pair<std::string, const Mat*>> tensors;
  const auto names = w.param_names();
  const auto params = w.params();
  for (std::size_t i = 0; i < names.size(); ++i) tensors.emplace_back(names[i], params[i]);
  for (const auto& [name, m] : bundle.extras) {
    if (name.find_first_of(" \n") != std::string::npos) throw Error("checkpoint: tensor names may not contain spaces");
    tensors.emplace_back(name, &m);
  }

  std::string payload;
  std::ostringstream header;
  header << "GPRUNE-CHECKPOINT\n";
  header << "version = " << kCheckpointVersion << "\n";
  header << "config.n_layers = " << c.n_layers << "\n";
  header << "config.d_model = " << c.d_model << "\n";
  header << "config.d_ffn = " << c.d_ffn << "\n";
  header << "config.n_heads = " << c.n_heads << "\n";
  header << "config.vocab_size = " << c.vocab_size << "\n";
  header << "config.max_seq_len = " << c.max_seq_len << "\n";
  header << "config.ffn_widths = " << join_ints(c.ffn_widths) << "\n";
  header << "config.head_counts = " << join_ints(c.head_counts) << "\n";
  header << "vocab.size = " << bundle.vocab.size() << "\n";
  for (const auto& tok : bundle.vocab) header << "vocab.token = " << hex_bytes(tok) << "\n";
  for (const auto& [name, m] : tensors) {
    header << "tensor " << name << " " << m->rows() << " " << m->cols() << " " << payload.size() << "\n";
    payload.append(reinterpret_cast<const char*>(m->data()), sizeof(double) * static_cast<std::size_t>(m->size()));
  }
  header << "payload_bytes = " << payload.size() << "\n";
  header << "payload_fnv = " << hex64(fnv1a64(payload)) << "\n";
  std::string head = header.str();
  head += "header_fnv = " + hex64(fnv1a64(head)) + "\n";
  head += "end\n";
  return head + payload;
}

ModelBundle checkpoint_deserialize(const std::string& bytes) {
  const std::string terminator = "\nend\n";
  const std::size_t end_pos = bytes.find(terminator);
  if (end_pos == std::string::npos) throw Error("checkpoint: truncated header");
  const std::string head = bytes.substr(0, end_pos + 1);
  const std::string payload = bytes.substr(end_pos + terminator.size());

  const std::size_t fnv_line = head.rfind("header_fnv = ");
  if (fnv_line == std::string::npos) throw Error("checkpoint: missing header checksum");
  const std::string covered = head.substr(0, fnv_line);
  const std::string stated = head.substr(fnv_line + 13, head.size() - fnv_line - 14);
  if (stated != hex64(fnv1a64(covered))) throw Error("checkpoint: header checksum mismatch (corrupt header)");

  std::istringstream in(covered);
  std::string line;
  std::getline(in, line);
  if (line != "GPRUNE-CHECKPOINT") throw Error("checkpoint: bad magic");

  ModelBundle bundle;
  ModelConfig c;
  std::vector<TensorEntry> entries;
  std::size_t payload_bytes = 0;
  std::string payload_fnv;
  std::size_t vocab_size = 0;
  bool have_version = false;
  while (std::getline(in, line)) {
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      TensorEntry e;
      if (!(ls >> e.name >> e.rows >> e.cols >> e.offset)) throw Error("checkpoint: bad tensor line");
      entries.push_back(e);
      continue;
    }
    const std::size_t eq = line.find(" = ");
    if (eq == std::string::npos) throw Error("checkpoint: malformed header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (key == "version") {
      if (std::stoi(value) != kCheckpointVersion) throw Error("checkpoint: unsupported version " + value);
      have_version = true;
    } else if (key == "config.n_layers") c.n_layers = std::stoi(value);
    else if (key == "config.d_model") c.d_model = std::stoi(value);
    else if (key == "config.d_ffn") c.d_ffn = std::stoi(value);
    else if (key == "config.n_heads") c.n_heads = std::stoi(value);
    else if (key == "config.vocab_size") c.vocab_size = std::stoi(value);
    else if (key == "config.max_seq_len") c.max_seq_len = std::stoi(value);
    else if (key == "config.ffn_widths") c.ffn_widths = split_ints(value);
    else if (key == "config.head_counts") c.head_counts = split_ints(value);
    else if (key == "vocab.size") vocab_size = std::stoul(value);
    else if (key == "vocab.token") bundle.vocab.push_back(unhex_bytes(value));
    else if (key == "payload_bytes") payload_bytes = std::stoul(value);
    else if (key == "payload_fnv") payload_fnv = value;
    else throw Error("checkpoint: unknown header key: " + key);
  }
  if (!have_version) throw Error("checkpoint: missing version");
  if (bundle.vocab.size() != vocab_size) throw Error("checkpoint: vocabulary size mismatch");
  if (payload.size() != payload_bytes) throw Error("checkpoint: truncated payload");
  if (hex64(fnv1a64(payload)) != payload_fnv) throw Error("checkpoint: payload checksum mismatch");
  c.validate();

  bundle.weights = ModelWeights::zeros(c);
  const auto names = bundle.weights.param_names();
  const auto params = bundle.weights.params();
  std::set<std::string> seen;
  for (const auto& e : entries) {
    const std::size_t n = static_cast<std::size_t>(e.rows * e.cols);
    if (e.rows < 0 || e.cols < 0 || e.offset + n * sizeof(double) > payload.size())
      throw Error("checkpoint: tensor " + e.name + " outside payload");
    Mat m(e.rows, e.cols);
    if (n) std::memcpy(m.data(), payload.data() + e.offset, n * sizeof(double));
    const auto it = std::find(names.begin(), names.end(), e.name);
    if (it == names.end()) {
      bundle.extras.emplace(e.name, std::move(m));
      continue;
    }
    Mat* dst = params[static_cast<std::size_t>(it - names.begin())];
    if (dst->rows() != e.rows || dst->cols() != e.cols)
      throw Error("checkpoint: tensor " + e.name + " has shape inconsistent with config");
    *dst = std::move(m);
    seen.insert(e.name);
  }
  if (seen.size() != names.size()) throw Error("checkpoint: missing model tensors");
  return bundle;
}

void checkpoint_save(const ModelBundle& bundle, const std::string& path) {
  const std::string bytes = checkpoint_serialize(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write: " + path);
}

ModelBundle checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return checkpoint_deserialize(bytes);
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(std::string(e.what()) + " [" + path + "]");
  }
}

}  // namespace gprune
