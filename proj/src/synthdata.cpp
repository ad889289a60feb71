#include "flam/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "flam/error.hpp"
#include "flam/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; big-endian hosts unsupported");

namespace flam {

namespace {

// Modified Gram-Schmidt over the leading `count` rows, two passes.
void orthonormalize(std::vector<std::vector<double>>& rows, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < i; ++j) {
                double dot = 0.0;
                for (std::size_t d = 0; d < rows[i].size(); ++d) {
                    dot += rows[i][d] * rows[j][d];
                }
                for (std::size_t d = 0; d < rows[i].size(); ++d) {
                    rows[i][d] -= dot * rows[j][d];
                }
            }
        }
        double norm = 0.0;
        for (double v : rows[i]) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-10) {
            throw TrainError("orthonormalize: degenerate random basis");
        }
        for (double& v : rows[i]) v /= norm;
    }
}

void normalize_row(std::vector<double>& row) {
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-10) throw TrainError("normalize: zero-norm vector");
    for (double& v : row) v /= norm;
}

std::vector<std::vector<double>> gaussian_rows(Rng& rng, std::size_t count,
                                               std::size_t dim) {
    std::vector<std::vector<double>> rows(count, std::vector<double>(dim));
    for (auto& row : rows) {
        for (double& v : row) v = rng.normal();
    }
    return rows;
}

void validate_config(const GenConfig& c, const AttributeSchema& s) {
    s.validate();
    if (c.dim == 0) throw ConfigError("gen: dim must be >= 1");
    if (c.instances == 0) throw ConfigError("gen: instances must be >= 1");
    if (c.views == 0) throw ConfigError("gen: views must be >= 1");
    if (!c.signal_strengths.empty() &&
        c.signal_strengths.size() != s.n_types()) {
        throw ConfigError("gen: signal_strengths size " +
                          std::to_string(c.signal_strengths.size()) +
                          " does not match " + std::to_string(s.n_types()) +
                          " attribute types");
    }
    for (double v : c.signal_strengths) {
        if (!(v > 0.0)) throw ConfigError("gen: signal strengths must be > 0");
    }
    if (c.style_strength < 0.0) throw ConfigError("gen: style_strength < 0");
    if (c.noise_sigma < 0.0) throw ConfigError("gen: noise_sigma < 0");
    if (c.label_density < 0.0 || c.label_density > 1.0) {
        throw ConfigError("gen: label_density must lie in [0,1]");
    }
    if (c.class_correlation < 0.0 || c.class_correlation > 1.0) {
        throw ConfigError("gen: class_correlation must lie in [0,1]");
    }
    if (c.mixing == Mixing::none && c.dim < s.total_classes()) {
        throw ConfigError(
            "gen: dim " + std::to_string(c.dim) + " < total class count " +
            std::to_string(s.total_classes()) +
            " with mixing=none; prototypes would collide");
    }
}

// Little-endian scalar I/O against an in-memory buffer.
template <typename T>
T read_le(const std::vector<char>& buf, std::size_t offset) {
    T v;
    std::memcpy(&v, buf.data() + offset, sizeof(T));
    return v;
}

template <typename T>
void append_le(std::string& out, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    out.append(tmp, sizeof(T));
}

constexpr char kMagic[8] = {'F', 'L', 'A', 'M', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8 + 4 + 4 + 8;

}  // namespace

AttributeSchema AttributeSchema::defaults() {
    return {{"shape", "color", "pattern"}, {10, 10, 10}};
}

std::size_t AttributeSchema::total_classes() const {
    return std::accumulate(class_counts.begin(), class_counts.end(),
                           std::size_t{0});
}

std::size_t AttributeSchema::index_of(std::string_view type) const {
    for (std::size_t i = 0; i < types.size(); ++i) {
        if (types[i] == type) return i;
    }
    throw ConfigError("schema: unknown attribute type '" + std::string(type) +
                      "'");
}

void AttributeSchema::validate() const {
    if (types.size() < 2) {
        throw ConfigError("schema: need >= 2 attribute types, got " +
                          std::to_string(types.size()));
    }
    if (class_counts.size() != types.size()) {
        throw ConfigError("schema: class_counts size mismatch");
    }
    for (std::size_t i = 0; i < types.size(); ++i) {
        if (class_counts[i] < 2) {
            throw ConfigError("schema: type '" + types[i] +
                              "' needs >= 2 classes");
        }
        for (std::size_t j = i + 1; j < types.size(); ++j) {
            if (types[i] == types[j]) {
                throw ConfigError("schema: duplicate type '" + types[i] + "'");
            }
        }
    }
}

std::string to_string(Mixing m) {
    return m == Mixing::none ? "none" : "random-rotation";
}

Mixing mixing_from_string(std::string_view s) {
    if (s == "none") return Mixing::none;
    if (s == "random-rotation") return Mixing::random_rotation;
    throw ConfigError("gen: unknown mixing mode '" + std::string(s) + "'");
}

Dataset generate(const GenConfig& config, const AttributeSchema& schema,
                 std::uint64_t seed) {
    validate_config(config, schema);
    const std::size_t n = schema.n_types();
    const std::size_t D = config.dim;
    const std::size_t total = schema.total_classes();

    Rng root(seed);

    // Class prototypes, drawn type-major so the stream layout is stable.
    Rng proto_rng = root.child("prototypes");
    std::vector<std::vector<double>> protos = gaussian_rows(proto_rng, total, D);
    if (D >= total) {
        orthonormalize(protos, total);
    } else {
        for (auto& row : protos) normalize_row(row);  // random-rotation only
    }
    std::vector<std::size_t> proto_offset(n, 0);
    for (std::size_t a = 1; a < n; ++a) {
        proto_offset[a] = proto_offset[a - 1] + schema.class_counts[a - 1];
    }

    std::vector<std::vector<double>> rotation;
    if (config.mixing == Mixing::random_rotation) {
        Rng rot_rng = root.child("rotation");
        rotation = gaussian_rows(rot_rng, D, D);
        orthonormalize(rotation, D);
    }

    std::vector<std::size_t> pair_first, pair_second;
    for (const auto& [first, second] : config.correlated_pairs) {
        const std::size_t fi = schema.index_of(first);
        const std::size_t si = schema.index_of(second);
        if (fi == si) {
            throw ConfigError("gen: correlated pair repeats type '" + first +
                              "'");
        }
        pair_first.push_back(fi);
        pair_second.push_back(si);
    }

    std::vector<double> signal = config.signal_strengths;
    if (signal.empty()) signal.assign(n, 1.0);

    Rng class_rng = root.child("classes");
    Rng corr_rng = root.child("correlation");
    Rng style_rng = root.child("style");
    Rng noise_rng = root.child("noise");
    Rng label_rng = root.child("labels");

    Dataset out;
    out.schema = schema;
    out.config = config;
    out.seed = seed;
    out.records.reserve(config.instances * config.views);

    std::vector<std::int32_t> classes(n);
    std::vector<double> style(D), raw(D), rotated(D);
    for (std::uint64_t inst = 0; inst < config.instances; ++inst) {
        for (std::size_t a = 0; a < n; ++a) {
            classes[a] = static_cast<std::int32_t>(
                class_rng.uniform_int(schema.class_counts[a]));
        }
        for (std::size_t p = 0; p < pair_first.size(); ++p) {
            const double u = corr_rng.uniform();
            if (u < config.class_correlation) {
                classes[pair_first[p]] = static_cast<std::int32_t>(
                    static_cast<std::size_t>(classes[pair_second[p]]) %
                    schema.class_counts[pair_first[p]]);
            }
        }
        for (double& v : style) v = config.style_strength * style_rng.normal();
        std::vector<std::int32_t> labels(n);
        for (std::size_t a = 0; a < n; ++a) {
            labels[a] =
                label_rng.uniform() < config.label_density ? classes[a] : kAbsent;
        }
        for (std::size_t view = 0; view < config.views; ++view) {
            for (std::size_t d = 0; d < D; ++d) {
                raw[d] = style[d] + config.noise_sigma * noise_rng.normal();
            }
            for (std::size_t a = 0; a < n; ++a) {
                const auto& proto =
                    protos[proto_offset[a] + static_cast<std::size_t>(classes[a])];
                for (std::size_t d = 0; d < D; ++d) {
                    raw[d] += signal[a] * proto[d];
                }
            }
            const std::vector<double>* feat = &raw;
            if (!rotation.empty()) {
                for (std::size_t r = 0; r < D; ++r) {
                    double s = 0.0;
                    for (std::size_t d = 0; d < D; ++d) {
                        s += rotation[r][d] * raw[d];
                    }
                    rotated[r] = s;
                }
                feat = &rotated;
            }
            double norm = 0.0;
            for (double v : *feat) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-10) {
                throw TrainError("gen: zero-norm feature at instance " +
                                 std::to_string(inst));
            }
            FeatureRecord rec;
            rec.instance_id = inst;
            rec.labels = labels;
            rec.feature.resize(D);
            for (std::size_t d = 0; d < D; ++d) {
                rec.feature[d] = static_cast<float>((*feat)[d] / norm);
            }
            out.records.push_back(std::move(rec));
        }
    }
    return out;
}

Splits split(const Dataset& dataset, SplitFractions fractions,
             std::uint64_t seed) {
    if (fractions.train < 0 || fractions.query < 0 || fractions.gallery < 0) {
        throw ConfigError("split: fractions must be non-negative");
    }
    const double sum = fractions.train + fractions.query + fractions.gallery;
    if (std::abs(sum - 1.0) > 1e-6) {
        throw ConfigError("split: fractions sum to " + std::to_string(sum) +
                          ", expected 1");
    }

    // Instances in first-appearance order, then shuffled.
    std::vector<std::uint64_t> instance_order;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        auto [it, fresh] = members.try_emplace(dataset.records[i].instance_id);
        if (fresh) instance_order.push_back(dataset.records[i].instance_id);
        it->second.push_back(i);
    }
    Rng rng = Rng(seed).child("split-order");
    rng.shuffle(instance_order);
    Rng view_rng = Rng(seed).child("query-view");

    const std::size_t total = dataset.records.size();
    const auto t_train = static_cast<std::size_t>(
        std::llround(fractions.train * static_cast<double>(total)));
    const auto t_query = static_cast<std::size_t>(
        std::llround(fractions.query * static_cast<double>(total)));

    Splits out;
    for (Dataset* d : {&out.train, &out.query, &out.gallery}) {
        d->schema = dataset.schema;
        d->config = dataset.config;
        d->seed = dataset.seed;
    }

    std::size_t pos = 0;
    while (pos < instance_order.size() && out.train.records.size() < t_train) {
        for (std::size_t idx : members[instance_order[pos]]) {
            out.train.records.push_back(dataset.records[idx]);
        }
        ++pos;
    }
    for (; pos < instance_order.size(); ++pos) {
        const auto& idxs = members[instance_order[pos]];
        if (out.query.records.size() < t_query && idxs.size() >= 2) {
            const std::size_t qsel = view_rng.uniform_int(idxs.size());
            for (std::size_t i = 0; i < idxs.size(); ++i) {
                (i == qsel ? out.query : out.gallery)
                    .records.push_back(dataset.records[idxs[i]]);
            }
        } else {
            for (std::size_t idx : idxs) {
                out.gallery.records.push_back(dataset.records[idx]);
            }
        }
    }
    if (out.query.records.size() < t_query) {
        throw ConfigError(
            "split: only " + std::to_string(out.query.records.size()) +
            " query records possible (need " + std::to_string(t_query) +
            "); too few multi-view instances outside train");
    }
    return out;
}

void save_features(const Dataset& dataset, const std::filesystem::path& path) {
    const std::size_t n = dataset.schema.n_types();
    const std::size_t D = dataset.config.dim;
    std::string buf;
    buf.reserve(kHeaderBytes + dataset.records.size() * (8 + 4 * n + 4 * D));
    buf.append(kMagic, sizeof(kMagic));
    append_le(buf, kVersion);
    append_le(buf, static_cast<std::uint32_t>(D));
    append_le(buf, static_cast<std::uint64_t>(dataset.records.size()));
    for (const FeatureRecord& rec : dataset.records) {
        if (rec.labels.size() != n || rec.feature.size() != D) {
            throw ContractError("save_features: record shape mismatch");
        }
        append_le(buf, rec.instance_id);
        for (std::int32_t l : rec.labels) append_le(buf, l);
        buf.append(reinterpret_cast<const char*>(rec.feature.data()), 4 * D);
    }
    nlohmann::json meta{{"schema", schema_to_json(dataset.schema)},
                        {"config", gen_config_to_json(dataset.config)},
                        {"seed", dataset.seed}};
    const std::string meta_str = meta.dump();
    append_le(buf, static_cast<std::uint64_t>(meta_str.size()));
    buf.append(meta_str);

    std::ofstream fs(path, std::ios::binary | std::ios::trunc);
    if (!fs) throw DataError("save_features: cannot open " + path.string());
    fs.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!fs) throw DataError("save_features: write failed for " + path.string());
}

Dataset load_features(const std::filesystem::path& path) {
    std::ifstream fs(path, std::ios::binary);
    if (!fs) throw DataError("load_features: cannot open " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(fs)),
                          std::istreambuf_iterator<char>());

    auto fail = [&](std::size_t offset, const std::string& what) -> void {
        throw DataError("load_features: " + what + " at offset " +
                        std::to_string(offset) + " in " + path.string());
    };
    if (buf.size() < kHeaderBytes) fail(buf.size(), "truncated header");
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        fail(0, "bad magic");
    }
    const auto version = read_le<std::uint32_t>(buf, 8);
    if (version != kVersion) {
        fail(8, "unsupported version " + std::to_string(version));
    }
    const auto D = static_cast<std::size_t>(read_le<std::uint32_t>(buf, 12));
    const auto count = read_le<std::uint64_t>(buf, 16);
    if (D == 0) fail(12, "zero feature dimension");
    if (count > 0 && count > (buf.size() - kHeaderBytes) / (8 + 4 * D)) {
        fail(16, "record count " + std::to_string(count) +
                     " exceeds file size");
    }

    // The attribute count lives in the JSON trailer; find the one candidate n
    // whose record block and trailer exactly tile the file.
    nlohmann::json meta;
    std::size_t n = 0;
    bool found = false;
    for (std::size_t cand = 0; cand <= 4096; ++cand) {
        const std::uint64_t body = count * (8 + 4 * cand + 4 * D);
        const std::uint64_t trailer_pos = kHeaderBytes + body;
        if (trailer_pos + 8 > buf.size()) break;
        const auto json_len =
            read_le<std::uint64_t>(buf, static_cast<std::size_t>(trailer_pos));
        if (trailer_pos + 8 + json_len != buf.size()) {
            if (count == 0) break;  // trailer position is fixed; no scan
            continue;
        }
        nlohmann::json parsed = nlohmann::json::parse(
            buf.data() + trailer_pos + 8, buf.data() + buf.size(),
            /*cb=*/nullptr, /*allow_exceptions=*/false);
        if (parsed.is_discarded()) {
            if (count == 0) break;
            continue;
        }
        std::size_t json_n = 0;
        if (parsed.contains("schema") && parsed["schema"].contains("types")) {
            json_n = parsed["schema"]["types"].size();
        }
        if (count == 0 || json_n == cand) {
            meta = std::move(parsed);
            n = count == 0 ? json_n : cand;
            found = true;
            break;
        }
    }
    if (!found) fail(kHeaderBytes, "no consistent record layout and trailer");

    Dataset out;
    try {
        out.schema = schema_from_json(meta.at("schema"));
        out.config = gen_config_from_json(meta.at("config"));
        out.seed = meta.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_features: bad metadata in " + path.string() +
                        ": " + e.what());
    }
    if (out.schema.n_types() != n || out.config.dim != D) {
        fail(kHeaderBytes, "metadata disagrees with record layout");
    }

    out.records.resize(count);
    std::size_t pos = kHeaderBytes;
    for (std::uint64_t r = 0; r < count; ++r) {
        FeatureRecord& rec = out.records[r];
        rec.instance_id = read_le<std::uint64_t>(buf, pos);
        pos += 8;
        rec.labels.resize(n);
        for (std::size_t a = 0; a < n; ++a) {
            rec.labels[a] = read_le<std::int32_t>(buf, pos);
            pos += 4;
            const auto limit =
                static_cast<std::int32_t>(out.schema.class_counts[a]);
            if (rec.labels[a] != kAbsent &&
                (rec.labels[a] < 0 || rec.labels[a] >= limit)) {
                fail(pos - 4, "record " + std::to_string(r) +
                                  " label out of range");
            }
        }
        rec.feature.resize(D);
        std::memcpy(rec.feature.data(), buf.data() + pos, 4 * D);
        pos += 4 * D;
        double norm = 0.0;
        for (float v : rec.feature) {
            if (!std::isfinite(v)) {
                fail(pos - 4 * D, "record " + std::to_string(r) +
                                      " has non-finite feature");
            }
            norm += static_cast<double>(v) * static_cast<double>(v);
        }
        if (norm == 0.0) {
            fail(pos - 4 * D, "record " + std::to_string(r) +
                                  " has zero-norm feature");
        }
    }
    return out;
}

nlohmann::json schema_to_json(const AttributeSchema& schema) {
    return {{"types", schema.types}, {"class_counts", schema.class_counts}};
}

AttributeSchema schema_from_json(const nlohmann::json& j) {
    AttributeSchema s;
    s.types = j.at("types").get<std::vector<std::string>>();
    s.class_counts = j.at("class_counts").get<std::vector<std::size_t>>();
    s.validate();
    return s;
}

nlohmann::json gen_config_to_json(const GenConfig& c) {
    return {{"dim", c.dim},
            {"instances", c.instances},
            {"views", c.views},
            {"signal_strengths", c.signal_strengths},
            {"style_strength", c.style_strength},
            {"noise_sigma", c.noise_sigma},
            {"mixing", to_string(c.mixing)},
            {"label_density", c.label_density},
            {"class_correlation", c.class_correlation},
            {"correlated_pairs", c.correlated_pairs}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig c;
    c.dim = j.at("dim").get<std::size_t>();
    c.instances = j.at("instances").get<std::size_t>();
    c.views = j.at("views").get<std::size_t>();
    if (j.contains("signal_strengths")) {
        c.signal_strengths = j["signal_strengths"].get<std::vector<double>>();
    }
    c.style_strength = j.at("style_strength").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.mixing = mixing_from_string(j.at("mixing").get<std::string>());
    c.label_density = j.at("label_density").get<double>();
    c.class_correlation = j.at("class_correlation").get<double>();
    if (j.contains("correlated_pairs")) {
        c.correlated_pairs =
            j["correlated_pairs"]
                .get<std::vector<std::pair<std::string, std::string>>>();
    }
    return c;
}

}  // namespace flam
