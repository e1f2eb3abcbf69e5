#include "aapp/history.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace aapp {

ChannelEnergy record_energy(const Tensor3& x) {
  ChannelEnergy e(size_t(x.c), 0.0);
  for (int b = 0; b < x.b; ++b) {
    for (int t = 0; t < x.s; ++t) {
      const float* r = x.row(b, t);
      for (int k = 0; k < x.c; ++k) {
        e[size_t(k)] += double(r[k]) * double(r[k]);
      }
    }
  }
  for (double v : e) {
    if (!std::isfinite(v)) throw std::invalid_argument("record_energy: non-finite input");
  }
  return e;
}

const char* store_label_name(StoreLabel l) {
  switch (l) {
    case StoreLabel::General: return "general";
    case StoreLabel::Benign: return "benign";
    default: return "harmful";
  }
}

const ChannelEnergy& TargetStores::store(StoreLabel l) const {
  switch (l) {
    case StoreLabel::General: return general;
    case StoreLabel::Benign: return benign;
    default: return harmful;
  }
}

ChannelEnergy& TargetStores::store(StoreLabel l) {
  return const_cast<ChannelEnergy&>(static_cast<const TargetStores*>(this)->store(l));
}

uint64_t& TargetStores::count(StoreLabel l) {
  switch (l) {
    case StoreLabel::General: return n_general;
    case StoreLabel::Benign: return n_benign;
    default: return n_harmful;
  }
}

uint64_t TargetStores::count(StoreLabel l) const {
  return const_cast<TargetStores*>(this)->count(l);
}

TargetStores& HistoryBank::at(PrunableTarget t) { return targets[t.key()]; }

const TargetStores& HistoryBank::at(PrunableTarget t) const {
  auto it = targets.find(t.key());
  if (it == targets.end()) {
    throw std::runtime_error("HistoryBank: no stores for target");
  }
  return it->second;
}

bool HistoryBank::complete_for(const std::vector<PrunableTarget>& ts) const {
  for (const auto& t : ts) {
    auto it = targets.find(t.key());
    if (it == targets.end()) return false;
    const TargetStores& s = it->second;
    if (s.n_general == 0 || s.n_benign == 0 || s.n_harmful == 0) return false;
    if (s.general.empty() || s.benign.empty() || s.harmful.empty()) return false;
  }
  return true;
}

void calibrate(const Model& m, const std::vector<std::vector<int>>& prompts,
               StoreLabel label, int batch_size, HistoryBank& bank) {
  if (prompts.empty()) throw std::invalid_argument("calibrate: no prompts");
  if (batch_size < 1) throw std::invalid_argument("calibrate: batch_size < 1");

  std::map<int, ChannelEnergy> acc;
  int batches = 0;

  size_t i = 0;
  while (i < prompts.size()) {
    // consecutive equal-length prompts form a rectangular batch
    const int len = int(prompts[i].size());
    if (len == 0) throw std::invalid_argument("calibrate: empty prompt");
    size_t j = i;
    while (j < prompts.size() && j - i < size_t(batch_size) &&
           int(prompts[j].size()) == len) {
      ++j;
    }
    TokenBatch batch(int(j - i), len);
    for (size_t p = i; p < j; ++p) {
      for (int t = 0; t < len; ++t) batch.at(int(p - i), t) = prompts[p][size_t(t)];
    }
    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = true;
    forward(m, batch, opts, &trace);
    for (const auto& [key, x_int] : trace.x_int) {
      ChannelEnergy e = record_energy(x_int);
      auto& slot = acc[key];
      if (slot.empty()) slot.assign(e.size(), 0.0);
      for (size_t k = 0; k < e.size(); ++k) slot[k] += e[k];
    }
    ++batches;
    i = j;
  }

  for (auto& [key, sum] : acc) {
    TargetStores& ts = bank.targets[key];
    ChannelEnergy& dst = ts.store(label);
    dst.assign(sum.size(), 0.0);
    for (size_t k = 0; k < sum.size(); ++k) dst[k] = sum[k] / double(batches);
    ts.count(label) = prompts.size();
  }
}

void refresh_general(TargetStores& stores, const ChannelEnergy& live_mean,
                     const RefreshPolicy& policy) {
  if (policy.window < 1) throw std::invalid_argument("refresh_general: window < 1");
  if (policy.ema_alpha < 0.0 || policy.ema_alpha > 1.0) {
    throw std::invalid_argument("refresh_general: ema_alpha out of range");
  }
  if (stores.general.size() != live_mean.size()) {
    throw std::invalid_argument("refresh_general: length mismatch");
  }
  const double a = policy.ema_alpha;
  for (size_t k = 0; k < live_mean.size(); ++k) {
    stores.general[k] = (1.0 - a) * stores.general[k] + a * live_mean[k];
  }
}

// ---------------------------------------------------------------------------
// Serialization. Little-endian binary; doubles stored bit-exact.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'A', 'A', 'P', 'P', 'B', 'N', 'K', '1'};
constexpr uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "bank file format assumes a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("bank file: truncated");
  return v;
}

void put_vec(std::ostream& os, const ChannelEnergy& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           std::streamsize(v.size() * sizeof(double)));
}

void get_vec(std::istream& is, ChannelEnergy& v, uint32_t n) {
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), std::streamsize(size_t(n) * sizeof(double)));
  if (!is) throw std::runtime_error("bank file: truncated");
}

}  // namespace

void save_bank(const HistoryBank& bank, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_bank: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  put(os, kFormatVersion);
  put(os, bank.config_hash);
  put(os, uint32_t(bank.targets.size()));
  for (const auto& [key, ts] : bank.targets) {
    const PrunableTarget t = PrunableTarget::from_key(key);
    put(os, int32_t(t.layer));
    put(os, int32_t(t.kind));
    put(os, uint32_t(ts.general.size()));
    put(os, ts.n_general);
    put(os, ts.n_benign);
    put(os, ts.n_harmful);
    put_vec(os, ts.general);
    put_vec(os, ts.benign);
    put_vec(os, ts.harmful);
  }
  if (!os) throw std::runtime_error("save_bank: write failed for " + path);
}

HistoryBank load_bank(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_bank: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("load_bank: not a bank file: " + path);
  }
  const auto version = get<uint32_t>(is);
  if (version != kFormatVersion) {
    throw std::runtime_error("load_bank: unsupported format version");
  }
  HistoryBank bank;
  bank.config_hash = get<uint64_t>(is);
  const auto n = get<uint32_t>(is);
  for (uint32_t i = 0; i < n; ++i) {
    const auto layer = get<int32_t>(is);
    const auto kind = get<int32_t>(is);
    const auto c = get<uint32_t>(is);
    const PrunableTarget t{int(layer), TargetKind(kind)};
    TargetStores ts;
    ts.n_general = get<uint64_t>(is);
    ts.n_benign = get<uint64_t>(is);
    ts.n_harmful = get<uint64_t>(is);
    get_vec(is, ts.general, c);
    get_vec(is, ts.benign, c);
    get_vec(is, ts.harmful, c);
    bank.targets[t.key()] = std::move(ts);
  }
  return bank;
}

}  // namespace aapp
