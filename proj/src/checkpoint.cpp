#include "emd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "emd/errors.hpp"

namespace emd {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "params.bin I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'M', 'D', 'P'};

template <class V>
void put(std::ofstream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::ifstream& in, const fs::path& path) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw FormatError("truncated parameter file " + path.string());
    return v;
}

/// Loaded parameters must match the layout implied by the configuration.
void check_layout(const ParamSet<float>& loaded, const ParamSet<float>& expected, const fs::path& dir) {
    const auto& a = loaded.entries();
    const auto& b = expected.entries();
    if (a.size() != b.size()) throw FormatError("checkpoint " + dir.string() + ": parameter count mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || !(a[i].value.shape() == b[i].value.shape()) || a[i].buffer != b[i].buffer) {
            throw FormatError("checkpoint " + dir.string() + ": parameter " + a[i].name +
                              " does not match the configured architecture");
        }
    }
}

json read_meta(const fs::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IoError("missing checkpoint metadata " + (dir / "meta.json").string());
    json meta;
    try {
        meta = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed " + (dir / "meta.json").string() + ": " + e.what());
    }
    if (meta.value("schema_version", 0) != kCheckpointSchemaVersion) {
        throw FormatError("unsupported checkpoint schema in " + dir.string());
    }
    return meta;
}

void write_meta(const fs::path& dir, const json& meta) {
    std::ofstream out(dir / "meta.json");
    out << meta.dump(2) << "\n";
    if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
}

}  // namespace

void save_params(const fs::path& path, const ParamSet<float>& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kMagic, 4);
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint8_t>(out, e.buffer ? 1 : 0);
        const Shape s = e.value.shape();
        for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(out, d);
        out.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(float)));
    }
    if (!out) throw IoError("cannot write " + path.string());
}

ParamSet<float> load_params(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not a parameter file");
    if (get<std::uint32_t>(in, path) != 1) throw FormatError(path.string() + ": unsupported version");
    const auto count = get<std::uint32_t>(in, path);
    ParamSet<float> ps;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(in, path);
        if (len > 4096) throw FormatError(path.string() + ": corrupt entry name");
        std::string name(len, '\0');
        in.read(name.data(), len);
        const bool buffer = get<std::uint8_t>(in, path) != 0;
        Shape s;
        s.n = get<std::int32_t>(in, path);
        s.c = get<std::int32_t>(in, path);
        s.h = get<std::int32_t>(in, path);
        s.w = get<std::int32_t>(in, path);
        if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0 || s.numel() > (1u << 26)) {
            throw FormatError(path.string() + ": corrupt shape for " + name);
        }
        Tensor<float>& t = ps.add(name, s, buffer);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!in) throw FormatError("truncated parameter file " + path.string());
    }
    return ps;
}

json to_json(const FerConfig& c) {
    return {{"fer_variant", to_string(c.variant)}, {"branches", c.branches},
            {"class_count", c.class_count},        {"trunk_channels", c.trunk_channels},
            {"branch_channels", c.branch_channels}, {"feature_channels", c.feature_channels},
            {"input_size", c.input_size}};
}

FerConfig fer_config_from_json(const json& j) {
    try {
        FerConfig c;
        c.variant = parse_fer_variant(j.at("fer_variant").get<std::string>());
        c.branches = j.at("branches").get<int>();
        c.class_count = j.at("class_count").get<int>();
        c.trunk_channels = j.at("trunk_channels").get<int>();
        c.branch_channels = j.at("branch_channels").get<int>();
        c.feature_channels = j.at("feature_channels").get<int>();
        c.input_size = j.at("input_size").get<int>();
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("fer config: ") + e.what());
    }
}

json to_json(const ManipConfig& c) {
    return {{"input_size", c.input_size},
            {"encoder_channels", c.encoder_channels},
            {"fusion", to_string(c.fusion)},
            {"fer_feature_channels", c.fer_feature_channels},
            {"spp_rates", c.spp_rates},
            {"spp_global_branch", c.spp_global_branch},
            {"decoder_channels", c.decoder_channels},
            {"clamp", c.clamp}};
}

ManipConfig manip_config_from_json(const json& j) {
    try {
        ManipConfig c;
        c.input_size = j.at("input_size").get<int>();
        c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
        c.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
        c.fer_feature_channels = j.at("fer_feature_channels").get<int>();
        c.spp_rates = j.at("spp_rates").get<std::vector<int>>();
        c.spp_global_branch = j.at("spp_global_branch").get<bool>();
        c.decoder_channels = j.at("decoder_channels").get<int>();
        c.clamp = j.at("clamp").get<double>();
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("manip config: ") + e.what());
    }
}

void save_fer_checkpoint(const fs::path& dir, const FerModel& model, int epoch, double val_accuracy) {
    ensure_dir(dir);
    save_params(dir / "params.bin", model.params);
    write_meta(dir, {{"schema_version", kCheckpointSchemaVersion},
                     {"module", "fer"},
                     {"config", to_json(model.config)},
                     {"epoch", epoch},
                     {"val_accuracy", val_accuracy}});
}

FerModel load_fer_checkpoint(const fs::path& dir) {
    const json meta = read_meta(dir);
    if (meta.value("module", "") != "fer") throw FormatError(dir.string() + " is not an expression checkpoint");
    FerModel m{fer_config_from_json(meta.at("config")), load_params(dir / "params.bin")};
    check_layout(m.params, init_fer_params<float>(m.config, 0), dir);
    return m;
}

void save_manip_checkpoint(const fs::path& dir, const ManipModel& model, const std::string& fer_ref, int epoch,
                           const json& metrics) {
    ensure_dir(dir);
    save_params(dir / "params.bin", model.params);
    write_meta(dir, {{"schema_version", kCheckpointSchemaVersion},
                     {"module", "emd"},
                     {"config", to_json(model.config)},
                     {"fer_checkpoint_ref", fer_ref},
                     {"epoch", epoch},
                     {"metrics", metrics}});
}

ManipCheckpoint load_manip_checkpoint(const fs::path& dir) {
    const json meta = read_meta(dir);
    if (meta.value("module", "") != "emd") throw FormatError(dir.string() + " is not a manipulation checkpoint");
    ManipCheckpoint c;
    c.model = ManipModel{manip_config_from_json(meta.at("config")), load_params(dir / "params.bin")};
    check_layout(c.model.params, init_manip_params<float>(c.model.config, 0), dir);
    c.fer_checkpoint_ref = meta.value("fer_checkpoint_ref", "");
    c.epoch = meta.value("epoch", 0);
    c.metrics = meta.value("metrics", json::object());
    return c;
}

}  // namespace emd
