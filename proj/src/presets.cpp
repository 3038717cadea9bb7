#include "fedmt/presets.hpp"

#include <cstdio>
#include <sstream>

#include "fedmt/federation.hpp"

namespace fedmt {

ParamCounts mbart50_counts(const Mbart50Shape& s) {
    const auto d = s.model_dim;
    const auto f = s.ffn_dim;
    const auto attn = 4 * (d * d + d);
    const auto ffn = d * f + f + f * d + d;
    const auto ln = 2 * d;
    const auto enc_layer = attn + ffn + 2 * ln;
    const auto dec_layer = 2 * attn + ffn + 3 * ln;
    const auto embeddings = s.vocab * d + 2 * s.positions * d;
    const auto extra_ln = 4 * ln;  // layernorm_embedding and final layer_norm, both sides

    ParamCounts c;
    c.label = "mbart50";
    c.backbone = embeddings + s.enc_layers * enc_layer + s.dec_layers * dec_layer + extra_ln;
    c.layer_norm = (2 * s.enc_layers + 3 * s.dec_layers) * ln + extra_ln;
    c.one_adapter = adapter_param_count(d, s.bottleneck);
    c.n_adapters = static_cast<int>(2 * s.enc_layers + 3 * s.dec_layers);
    c.adapters = c.n_adapters * c.one_adapter;
    c.pruned_third = (2 * (s.enc_layers / 3) + 3 * (s.dec_layers / 3)) * c.one_adapter;
    c.total_layers = static_cast<int>(s.enc_layers + s.dec_layers);
    return c;
}

ParamCounts toy_counts(const ModelConfig& config) {
    ModelConfig with = config;
    with.use_adapters = true;
    with.train_backbone = false;
    const ToyModel m = build_model(with, 0);

    ParamCounts c;
    c.label = "toy";
    for (const auto& [name, t] : m.params) {
        const bool adapter = name.find("_adapter.") != std::string::npos;
        if (adapter) {
            c.adapters += t.numel();
        } else {
            c.backbone += t.numel();
            if (t.trainable) c.layer_norm += t.numel();
        }
    }
    c.one_adapter = adapter_param_count(config.model_dim, config.adapter_bottleneck);
    c.n_adapters = static_cast<int>(adapter_ids(with).size());
    if (config.enc_layers % 3 == 0 && config.dec_layers % 3 == 0) {
        c.pruned_third = count_adapter_params(apply_pruning(m, PruneStrategy::InputEnd));
    }
    c.total_layers = config.enc_layers + config.dec_layers;
    return c;
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

}  // namespace

std::string format_count_table(const ParamCounts& c, const CountTableOptions& opt) {
    std::ostringstream os;
    auto row = [&](const std::string& k, const std::string& v) {
        os << k;
        for (std::size_t i = k.size(); i < 40; ++i) os << ' ';
        os << v << '\n';
    };
    auto count = [&](std::int64_t n) { return std::to_string(n) + " (" + fmt("%.2fM", static_cast<double>(n) / 1e6) + ")"; };
    auto saving = [&](std::int64_t n) { return fmt("%.2f%%", 100.0 * (1.0 - static_cast<double>(n) / static_cast<double>(c.backbone))); };
    auto bytes = [&](std::int64_t n) { return n * opt.bytes_per_param; };
    auto gb = [&](std::int64_t n) { return fmt("%.4f GB", static_cast<double>(bytes(n)) / 1e9); };

    const auto with_ln = c.adapters + c.layer_norm;
    os << "preset: " << c.label << "\n";
    row("backbone params", count(c.backbone));
    row("single adapter params", count(c.one_adapter));
    row("adapters", std::to_string(c.n_adapters));
    row("adapter params", count(c.adapters));
    row("layer-norm params", count(c.layer_norm));
    row("adapter + layer-norm params", count(with_ln));
    if (c.pruned_third > 0) row("pruned third adapter params", count(c.pruned_third));
    os << '\n';
    row("backbone payload", gb(c.backbone));
    row("adapter payload", gb(c.adapters));
    row("adapter + layer-norm payload", gb(with_ln));
    os << '\n';
    row("saving, adapters", saving(c.adapters));
    row("saving, adapters + layer-norm", saving(with_ln));
    if (c.pruned_third > 0) row("saving, pruned third", saving(c.pruned_third));
    if (opt.shared_layers > 0 && c.total_layers > 0) {
        row("saving, " + std::to_string(opt.shared_layers) + " of " + std::to_string(c.total_layers) + " layers",
            fmt("%.2f%%", 100.0 * (1.0 - static_cast<double>(opt.shared_layers) / c.total_layers)));
    }
    os << '\n';
    os << "transfer time at " << fmt("%.0f", opt.bandwidth_bps / 1e6) << " Mbps, " << opt.n_clients
       << " clients sharing the link\n";
    auto trow = [&](const std::string& k, std::int64_t n) {
        const auto t = estimate_transfer(bytes(n), opt.n_clients, opt.bandwidth_bps);
        row("  " + k, fmt("%.3f s per client", t.per_client_seconds) + fmt(", %.2f s total", t.serialized_seconds));
    };
    trow("backbone", c.backbone);
    trow("adapters", c.adapters);
    trow("adapters + layer-norm", with_ln);
    if (c.pruned_third > 0) trow("pruned third", c.pruned_third);
    return os.str();
}

}  // namespace fedmt
