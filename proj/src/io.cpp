#include "shadowalign/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "shadowalign/error.hpp"

namespace shadowalign {

void Container::add(std::string name, Tensor t) {
  ContainerEntry e;
  e.name = std::move(name);
  e.f32 = std::move(t);
  entries.push_back(std::move(e));
}

void Container::add(std::string name, std::vector<std::uint64_t> values) {
  ContainerEntry e;
  e.name = std::move(name);
  e.u64 = std::move(values);
  e.is_u64 = true;
  entries.push_back(std::move(e));
}

void Container::set_meta(std::string key, std::string value) {
  for (auto& [k, v] : metadata)
    if (k == key) {
      v = std::move(value);
      return;
    }
  metadata.emplace_back(std::move(key), std::move(value));
}

const ContainerEntry* Container::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

const Tensor& Container::tensor(std::string_view name) const {
  const ContainerEntry* e = find(name);
  if (!e || e->is_u64) throw FormatError("container has no f32 tensor '" + std::string(name) + "'");
  return e->f32;
}

const std::vector<std::uint64_t>& Container::u64(std::string_view name) const {
  const ContainerEntry* e = find(name);
  if (!e || !e->is_u64) throw FormatError("container has no u64 array '" + std::string(name) + "'");
  return e->u64;
}

std::optional<std::string> Container::meta(std::string_view key) const {
  for (const auto& [k, v] : metadata)
    if (k == key) return v;
  return std::nullopt;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void uint(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(std::string_view s) { out_.append(s); }
  void str16(std::string_view s) {
    if (s.size() > 0xffff) throw InvalidArgument("container name too long");
    uint(s.size(), 2);
    bytes(s);
  }
  void str32(std::string_view s) {
    if (s.size() > 0xffffffffULL) throw InvalidArgument("container string too long");
    uint(s.size(), 4);
    bytes(s);
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    uint(bits, 4);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("truncated container while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16(const char* what) { return std::string(bytes(uint(2, what), what)); }
  std::string str32(const char* what) { return std::string(bytes(uint(4, what), what)); }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const Container& c) {
  Writer w;
  w.bytes(std::string_view(kContainerMagic, 8));
  w.uint(kContainerVersion, 2);
  w.str32(c.descriptor);
  w.uint(c.entries.size(), 4);
  for (const auto& e : c.entries) {
    w.str16(e.name);
    if (e.is_u64) {
      w.u8(1);
      w.u8(1);
      w.uint(e.u64.size(), 4);
      w.uint(e.u64.size() * 8, 8);
      for (auto v : e.u64) w.uint(v, 8);
    } else {
      if (e.f32.shape.size() > 255) throw InvalidArgument("tensor rank too large for the container");
      if (shape_size(e.f32.shape) != e.f32.size()) throw ShapeError("tensor '" + e.name + "' payload disagrees with shape");
      w.u8(0);
      w.u8(static_cast<std::uint8_t>(e.f32.shape.size()));
      for (auto d : e.f32.shape) w.uint(d, 4);
      w.uint(e.f32.size() * 4, 8);
      for (float f : e.f32.data) w.f32(f);
    }
  }
  w.uint(c.metadata.size(), 4);
  for (const auto& [k, v] : c.metadata) {
    w.str16(k);
    w.str32(v);
  }
  return w.take();
}

Container decode_container(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(8, "magic") != std::string_view(kContainerMagic, 8)) throw FormatError("bad magic: not a shadowalign container");
  const auto version = r.uint(2, "version");
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  Container c;
  c.descriptor = r.str32("descriptor");
  const auto count = r.uint(4, "tensor count");
  for (std::uint64_t t = 0; t < count; ++t) {
    ContainerEntry e;
    e.name = r.str16("tensor name");
    const auto dtype = r.uint(1, "dtype");
    const auto ndim = r.uint(1, "ndim");
    Shape shape;
    for (std::uint64_t d = 0; d < ndim; ++d) shape.push_back(r.uint(4, "dims"));
    const auto nbytes = r.uint(8, "payload length");
    const std::size_t n = shape_size(shape);
    if (dtype == 0) {
      if (nbytes != n * 4) {
        throw FormatError("tensor '" + e.name + "': payload of " + std::to_string(nbytes) + " bytes does not match shape " +
                          shape_string(shape));
      }
      r.need(nbytes, "payload");
      std::vector<float> data(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto bits = static_cast<std::uint32_t>(r.uint(4, "payload"));
        std::memcpy(&data[i], &bits, 4);
      }
      e.f32.shape = std::move(shape);
      e.f32.data = std::move(data);
    } else if (dtype == 1) {
      if (ndim != 1 || nbytes != n * 8) throw FormatError("u64 array '" + e.name + "' has an inconsistent length");
      r.need(nbytes, "payload");
      e.is_u64 = true;
      e.u64.resize(n);
      for (auto& v : e.u64) v = r.uint(8, "payload");
    } else {
      throw FormatError("tensor '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    }
    c.entries.push_back(std::move(e));
  }
  const auto nmeta = r.uint(4, "metadata count");
  for (std::uint64_t i = 0; i < nmeta; ++i) {
    std::string k = r.str16("metadata key");
    std::string v = r.str32("metadata value");
    c.metadata.emplace_back(std::move(k), std::move(v));
  }
  if (!r.done()) throw FormatError("trailing bytes after container end at byte " + std::to_string(r.pos()));
  return c;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling and rename, so concurrent readers never see a torn file.
  const auto tmp = path.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_container(const std::filesystem::path& path, const Container& c) { write_file(path, encode_container(c)); }

Container read_container(const std::filesystem::path& path) {
  try {
    return decode_container(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Container checkpoint_container(const Model& model, const SeedBundle& seeds, const std::string& train_log_digest) {
  model.validate();
  Container c;
  c.descriptor = describe(model);
  const auto ops = model.param_ops();
  for (std::size_t l = 0; l < ops.size(); ++l) {
    c.add("layer" + std::to_string(l) + ".weight", model.layers[ops[l]].weight);
    c.add("layer" + std::to_string(l) + ".bias", model.layers[ops[l]].bias);
  }
  c.set_meta("arch_id", model.arch_id);
  c.set_meta("seed_wi", std::to_string(seeds.wi));
  c.set_meta("seed_bo", std::to_string(seeds.bo));
  c.set_meta("seed_ds", std::to_string(seeds.ds));
  c.set_meta("train_log_digest", train_log_digest);
  return c;
}

Checkpoint checkpoint_from_container(const Container& c) {
  Checkpoint ck;
  try {
    ck.model = build_model(c.descriptor);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint architecture descriptor is invalid: ") + e.what());
  }
  const auto ops = ck.model.param_ops();
  if (c.entries.size() != 2 * ops.size()) {
    throw FormatError("checkpoint holds " + std::to_string(c.entries.size()) + " tensors, architecture needs " +
                      std::to_string(2 * ops.size()));
  }
  for (std::size_t l = 0; l < ops.size(); ++l) {
    for (const char* part : {"weight", "bias"}) {
      const std::string name = "layer" + std::to_string(l) + "." + part;
      const Tensor& t = c.tensor(name);
      Tensor& dst = std::string(part) == "weight" ? ck.model.layers[ops[l]].weight : ck.model.layers[ops[l]].bias;
      if (t.shape != dst.shape) {
        throw FormatError("tensor '" + name + "' has shape " + shape_string(t.shape) + ", architecture expects " +
                          shape_string(dst.shape));
      }
      dst = t;
    }
  }
  if (auto id = c.meta("arch_id")) ck.model.arch_id = *id;
  auto seed = [&](const char* key) -> std::uint64_t {
    auto v = c.meta(key);
    if (!v) return 0;
    try {
      return std::stoull(*v);
    } catch (const std::exception&) {
      throw FormatError(std::string("metadata ") + key + " is not an integer");
    }
  };
  ck.seeds = {seed("seed_wi"), seed("seed_bo"), seed("seed_ds")};
  ck.train_log_digest = c.meta("train_log_digest").value_or("");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const SeedBundle& seeds,
                     const std::string& train_log_digest) {
  write_container(path, checkpoint_container(model, seeds, train_log_digest));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  try {
    return checkpoint_from_container(c);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

namespace {

Tensor stack(const std::vector<const Tensor*>& items, const char* what) {
  if (items.empty()) return Tensor({0});
  const Shape& s = items.front()->shape;
  Shape shape{items.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t n = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape != s) throw ShapeError(std::string("records of differing shape in ") + what);
    std::copy(items[i]->data.begin(), items[i]->data.end(), out.data.begin() + static_cast<long>(i * n));
  }
  return out;
}

Tensor row(const Tensor& t, std::size_t i) {
  Shape s(t.shape.begin() + 1, t.shape.end());
  const std::size_t n = shape_size(s);
  return Tensor(s, std::vector<float>(t.data.begin() + static_cast<long>(i * n),
                                      t.data.begin() + static_cast<long>((i + 1) * n)));
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  Container c;
  c.descriptor = "dataset";
  std::vector<const Tensor*> recs;
  for (const auto& r : data.records) recs.push_back(&r);
  c.add("records", stack(recs, "dataset"));
  c.add("labels", std::vector<std::uint64_t>(data.labels.begin(), data.labels.end()));
  c.add("ids", data.ids);
  write_container(path, c);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.descriptor != "dataset") throw FormatError(path.string() + " is not a dataset container");
  const Tensor& recs = c.tensor("records");
  const auto& labels = c.u64("labels");
  const auto& ids = c.u64("ids");
  const std::size_t n = recs.rank() ? recs.dim(0) : 0;
  if (labels.size() != n || ids.size() != n) throw FormatError(path.string() + ": record, label and id counts differ");
  LabeledDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    d.records.push_back(row(recs, i));
    d.labels.push_back(labels[i]);
    d.ids.push_back(ids[i]);
  }
  return d;
}

LabeledDataset load_csv_dataset(const std::filesystem::path& path, const Shape& record_shape) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  LabeledDataset d;
  std::string line;
  std::size_t lineno = 0, width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<float> values;
    std::size_t label = 0;
    bool first = true, header = false;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        if (lineno == 1) {
          header = true;
          break;
        }
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
      }
      if (first) {
        if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
          throw FormatError(path.string() + ":" + std::to_string(lineno) + ": label must be a non-negative integer");
        }
        label = static_cast<std::size_t>(v);
        first = false;
      } else {
        values.push_back(static_cast<float>(v));
      }
    }
    if (header) continue;
    if (values.empty()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": no features");
    if (width == 0) width = values.size();
    if (values.size() != width) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": ragged row");
    Shape shape = record_shape.empty() ? Shape{width} : record_shape;
    if (shape_size(shape) != width) {
      throw ShapeError(path.string() + ": rows of " + std::to_string(width) + " features cannot form records of shape " +
                       shape_string(shape));
    }
    d.ids.push_back(d.records.size());
    d.records.emplace_back(shape, std::move(values));
    d.labels.push_back(label);
  }
  return d;
}

void save_csv_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ostringstream os;
  os.precision(9);
  if (!data.empty()) {
    os << "label";
    for (std::size_t i = 0; i < data.records.front().size(); ++i) os << ",f" << i + 1;
    os << '\n';
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << data.labels[i];
    for (float v : data.records[i].data) os << ',' << v;
    os << '\n';
  }
  write_file(path, os.str());
}

Container feature_groups_container(const std::vector<FeatureGroup>& groups, const FeatureSpec& spec) {
  Container c;
  c.descriptor = "attack-features";
  c.set_meta("features", spec.to_string());
  c.set_meta("groups", std::to_string(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& recs = groups[g].records;
    const std::string p = "g" + std::to_string(g) + "/";
    c.set_meta(p + "source", std::to_string(groups[g].source));
    std::vector<std::uint64_t> labels, ids, member;
    for (const auto& r : recs) {
      labels.push_back(r.label);
      ids.push_back(r.record_id);
      member.push_back(r.member ? (*r.member ? 1 : 0) : 2);
    }
    c.add(p + "labels", labels);
    c.add(p + "ids", ids);
    c.add(p + "member", member);
    if (recs.empty()) continue;
    auto collect = [&](auto get) {
      std::vector<const Tensor*> v;
      for (const auto& r : recs) v.push_back(&get(r));
      return v;
    };
    for (std::size_t i = 0; i < recs.front().oa.size(); ++i)
      c.add(p + "oa" + std::to_string(i), stack(collect([&](const RecordFeatures& r) -> const Tensor& { return r.oa.at(i); }), "oa"));
    for (std::size_t i = 0; i < recs.front().grad.size(); ++i)
      c.add(p + "grad" + std::to_string(i),
            stack(collect([&](const RecordFeatures& r) -> const Tensor& { return r.grad.at(i); }), "grad"));
    if (!recs.front().ia.empty())
      c.add(p + "ia", stack(collect([](const RecordFeatures& r) -> const Tensor& { return r.ia; }), "ia"));
    if (!recs.front().output.empty())
      c.add(p + "output", stack(collect([](const RecordFeatures& r) -> const Tensor& { return r.output; }), "output"));
    if (!recs.front().set_vectors.empty()) {
      const std::size_t D = recs.front().set_vectors.size(), w = recs.front().set_vectors.front().size();
      Tensor t({recs.size(), D, w});
      for (std::size_t r = 0; r < recs.size(); ++r) {
        if (recs[r].set_vectors.size() != D) throw ShapeError("set vectors of differing count");
        for (std::size_t d = 0; d < D; ++d)
          std::copy(recs[r].set_vectors[d].data.begin(), recs[r].set_vectors[d].data.end(),
                    t.data.begin() + static_cast<long>((r * D + d) * w));
      }
      c.add(p + "set", std::move(t));
    }
  }
  return c;
}

std::vector<FeatureGroup> feature_groups_from_container(const Container& c) {
  if (c.descriptor != "attack-features") throw FormatError("not an attack-feature container");
  const std::size_t n_groups = std::stoull(c.meta("groups").value_or("0"));
  std::vector<FeatureGroup> groups(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::string p = "g" + std::to_string(g) + "/";
    groups[g].source = std::stoull(c.meta(p + "source").value_or("0"));
    const auto& labels = c.u64(p + "labels");
    const auto& ids = c.u64(p + "ids");
    const auto& member = c.u64(p + "member");
    const std::size_t n = labels.size();
    if (ids.size() != n || member.size() != n) throw FormatError("feature group " + std::to_string(g) + " is inconsistent");
    auto& recs = groups[g].records;
    recs.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      recs[r].label = labels[r];
      recs[r].record_id = ids[r];
      if (member[r] < 2) recs[r].member = member[r] == 1;
    }
    auto rows = [&](const Tensor& t, auto set) {
      if (!t.rank() || t.dim(0) != n) throw FormatError("feature tensor row count mismatch");
      for (std::size_t r = 0; r < n; ++r) set(recs[r], row(t, r));
    };
    for (std::size_t i = 0; c.find(p + "oa" + std::to_string(i)); ++i)
      rows(c.tensor(p + "oa" + std::to_string(i)), [](RecordFeatures& f, Tensor t) { f.oa.push_back(std::move(t)); });
    for (std::size_t i = 0; c.find(p + "grad" + std::to_string(i)); ++i)
      rows(c.tensor(p + "grad" + std::to_string(i)), [](RecordFeatures& f, Tensor t) { f.grad.push_back(std::move(t)); });
    if (c.find(p + "ia")) rows(c.tensor(p + "ia"), [](RecordFeatures& f, Tensor t) { f.ia = std::move(t); });
    if (c.find(p + "output")) rows(c.tensor(p + "output"), [](RecordFeatures& f, Tensor t) { f.output = std::move(t); });
    if (c.find(p + "set")) {
      rows(c.tensor(p + "set"), [](RecordFeatures& f, Tensor t) {
        const std::size_t D = t.dim(0), w = t.dim(1);
        for (std::size_t d = 0; d < D; ++d)
          f.set_vectors.emplace_back(Shape{w}, std::vector<float>(t.data.begin() + static_cast<long>(d * w),
                                                                 t.data.begin() + static_cast<long>((d + 1) * w)));
      });
    }
  }
  return groups;
}

}  // namespace shadowalign
