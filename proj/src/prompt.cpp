#include "dlab/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dlab/error.hpp"
#include "dlab/rng.hpp"

namespace dlab {

Vocabulary Vocabulary::standard() {
    return Vocabulary{
        {"circle", "square", "triangle", "cross", "star", "ring", "bar", "diamond"},
        {"red", "green", "blue", "yellow", "cyan", "magenta"},
        {"striped", "checkered", "dotted", "noisy"},
    };
}

const std::string& Vocabulary::attribute_word(int attribute_id) const {
    if (attribute_id < 0 || attribute_id >= n_attrs()) {
        throw VocabularyError("attribute id " + std::to_string(attribute_id) + " out of range");
    }
    return attribute_id < n_colors() ? colors[attribute_id] : textures[attribute_id - n_colors()];
}

AttributeKind Vocabulary::kind_of(int attribute_id) const {
    if (attribute_id < 0 || attribute_id >= n_attrs()) {
        throw VocabularyError("attribute id " + std::to_string(attribute_id) + " out of range");
    }
    return attribute_id < n_colors() ? AttributeKind::color : AttributeKind::texture;
}

PromptSpec make_prompt(const Vocabulary& vocab, int noun_id, int attribute_id) {
    if (noun_id < 0 || noun_id >= vocab.n_nouns()) {
        throw VocabularyError("noun id " + std::to_string(noun_id) + " out of range");
    }
    return PromptSpec{noun_id, attribute_id, vocab.kind_of(attribute_id)};
}

std::string prompt_text(const Vocabulary& vocab, const PromptSpec& p) {
    return "a " + vocab.attribute_word(p.attribute_id) + " " + vocab.nouns.at(p.noun_id);
}

const char* to_string(AttributeKind kind) { return kind == AttributeKind::color ? "COLOR" : "TEXTURE"; }

const char* to_string(TokenClass c) {
    switch (c) {
        case TokenClass::sos: return "SOS";
        case TokenClass::sem: return "SEM";
        case TokenClass::eos: return "EOS";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Renderer

namespace {

void validate(const Vocabulary& vocab, const PromptSpec& p) {
    if (p.noun_id < 0 || p.noun_id >= vocab.n_nouns()) {
        throw VocabularyError("noun id " + std::to_string(p.noun_id) + " out of range");
    }
    if (p.attribute_id < 0 || p.attribute_id >= vocab.n_attrs()) {
        throw VocabularyError("attribute id " + std::to_string(p.attribute_id) + " out of range");
    }
    if (vocab.kind_of(p.attribute_id) != p.attribute_kind) {
        throw VocabularyError("attribute kind does not match attribute id " + std::to_string(p.attribute_id));
    }
}

struct Placement {
    double cy, cx, scale;
};

Placement placement(std::uint64_t jitter_seed, int rows, int cols, double amount) {
    Rng rng(mix_seed(jitter_seed, 0));
    double dy = rng.uniform(-1.0, 1.0) * amount;
    double dx = rng.uniform(-1.0, 1.0) * amount;
    double ds = rng.uniform(-0.1, 0.1) * amount;
    return {rows / 2.0 + dy, cols / 2.0 + dx, 0.34 * std::min(rows, cols) * (1.0 + ds)};
}

// ux, uy are pixel offsets from the glyph centre in units of the glyph scale.
bool inside_glyph(int noun, double ux, double uy) {
    double r = std::hypot(ux, uy);
    switch (noun % 8) {
        case 0: return r <= 1.0;                                            // circle
        case 1: return std::max(std::fabs(ux), std::fabs(uy)) <= 0.8;       // square
        case 2: return uy >= -0.85 && uy <= 0.8 && std::fabs(ux) <= (uy + 0.85) * 0.6;  // triangle
        case 3: return (std::fabs(ux) <= 0.3 && std::fabs(uy) <= 1.0) ||
                       (std::fabs(uy) <= 0.3 && std::fabs(ux) <= 1.0);      // cross
        case 4: {                                                           // star
            double theta = std::atan2(uy, ux) + std::numbers::pi / 2.0;
            return r <= 0.55 + 0.45 * std::cos(5.0 * theta);
        }
        case 5: return r >= 0.55 && r <= 1.0;                               // ring
        case 6: return std::fabs(ux) <= 1.0 && std::fabs(uy) <= 0.3;        // bar
        case 7: return std::fabs(ux) + std::fabs(uy) <= 1.0;                // diamond
    }
    return false;
}

// Fixed per-pixel hash in [-1, 1] for the "noisy" texture.
double pixel_hash(int r, int c) {
    std::uint64_t h = splitmix64((static_cast<std::uint64_t>(r) << 32) ^ static_cast<std::uint64_t>(c) ^ 0xC0FFEEull);
    return static_cast<double>(h >> 11) / static_cast<double>(1ull << 53) * 2.0 - 1.0;
}

void fill_pixel(const Vocabulary& vocab, int attribute_id, int r, int c, double rgb[3]) {
    constexpr double k = 0.9;
    if (attribute_id < vocab.n_colors()) {
        static constexpr double table[6][3] = {
            {k, -k, -k}, {-k, k, -k}, {-k, -k, k}, {k, k, -k}, {-k, k, k}, {k, -k, k},
        };
        const double* col = table[attribute_id % 6];
        // Colors beyond the base six cycle with a dimmed intensity.
        double dim = 1.0 - 0.3 * (attribute_id / 6);
        for (int i = 0; i < 3; ++i) rgb[i] = col[i] * dim;
        return;
    }
    double v = 0.0;
    switch ((attribute_id - vocab.n_colors()) % 4) {
        case 0: v = (r % 2 == 0) ? k : -k; break;                              // stripes
        case 1: v = ((r + c) % 2 == 0) ? k : -k; break;                        // checker
        case 2: v = (r % 3 == 1 && c % 3 == 1) ? k : -0.6; break;              // dots
        case 3: v = k * pixel_hash(r, c); break;                               // noise
    }
    rgb[0] = rgb[1] = rgb[2] = v;
}

}  // namespace

LatentGrid render_glyph_mask(const Vocabulary& vocab, const PromptSpec& p, std::uint64_t jitter_seed, int rows,
                             int cols, double jitter_amount) {
    validate(vocab, p);
    Placement pl = placement(jitter_seed, rows, cols, jitter_amount);
    LatentGrid mask(1, rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double uy = (r + 0.5 - pl.cy) / pl.scale;
            double ux = (c + 0.5 - pl.cx) / pl.scale;
            mask.at(0, r, c) = inside_glyph(p.noun_id, ux, uy) ? 1.0 : 0.0;
        }
    }
    return mask;
}

LatentGrid render_example(const Vocabulary& vocab, const PromptSpec& p, std::uint64_t jitter_seed, int rows, int cols,
                          double jitter_amount) {
    LatentGrid mask = render_glyph_mask(vocab, p, jitter_seed, rows, cols, jitter_amount);
    LatentGrid img(3, rows, cols, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (mask.at(0, r, c) == 0.0) continue;
            double rgb[3];
            fill_pixel(vocab, p.attribute_id, r, c, rgb);
            for (int ch = 0; ch < 3; ++ch) img.at(ch, r, c) = rgb[ch];
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Prompt sets and datasets

std::vector<PromptSpec> build_promptset(const PromptSetConfig& cfg, std::uint64_t seed) {
    if (cfg.n_nouns <= 0 || cfg.n_colors < 0 || cfg.n_textures < 0 || cfg.count < 0) {
        throw ParameterError("build_promptset: invalid vocabulary sizes");
    }
    int color_pool   = cfg.n_nouns * cfg.n_colors;
    int texture_pool = cfg.n_nouns * cfg.n_textures;
    if (cfg.count > color_pool + texture_pool) {
        throw CapacityError("build_promptset: requested " + std::to_string(cfg.count) + " prompts but only " +
                            std::to_string(color_pool + texture_pool) + " combinations exist");
    }

    int n_color   = (cfg.count + 1) / 2;
    int n_texture = cfg.count - n_color;
    if (n_color > color_pool) {
        n_texture += n_color - color_pool;
        n_color = color_pool;
    } else if (n_texture > texture_pool) {
        n_color += n_texture - texture_pool;
        n_texture = texture_pool;
    }

    std::vector<PromptSpec> colors, textures;
    for (int n = 0; n < cfg.n_nouns; ++n) {
        for (int a = 0; a < cfg.n_colors; ++a) colors.push_back({n, a, AttributeKind::color});
        for (int a = 0; a < cfg.n_textures; ++a) textures.push_back({n, cfg.n_colors + a, AttributeKind::texture});
    }
    Rng rng(seed);
    std::shuffle(colors.begin(), colors.end(), rng.engine());
    std::shuffle(textures.begin(), textures.end(), rng.engine());

    std::vector<PromptSpec> out(colors.begin(), colors.begin() + n_color);
    out.insert(out.end(), textures.begin(), textures.begin() + n_texture);
    std::shuffle(out.begin(), out.end(), rng.engine());
    return out;
}

std::vector<Example> make_dataset(const Vocabulary& vocab, const std::vector<PromptSpec>& prompts, int per_prompt,
                                  std::uint64_t seed, int rows, int cols, double jitter_amount) {
    std::vector<Example> out;
    out.reserve(prompts.size() * per_prompt);
    std::uint64_t index = 0;
    for (int k = 0; k < per_prompt; ++k) {
        for (const auto& p : prompts) {
            std::uint64_t js = mix_seed(seed, index++);
            out.push_back({p, js, render_example(vocab, p, js, rows, cols, jitter_amount)});
        }
    }
    return out;
}

void export_dataset(const std::vector<Example>& data, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream labels(dir + "/labels.csv");
    if (!labels) throw DataError("cannot write " + dir + "/labels.csv");
    labels << "index,noun_id,attribute_id,attribute_kind,jitter_seed\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& e = data[i];
        write_f32(e.image, dir + "/img_" + std::to_string(i) + ".f32");
        labels << i << ',' << e.prompt.noun_id << ',' << e.prompt.attribute_id << ','
               << to_string(e.prompt.attribute_kind) << ',' << e.jitter_seed << '\n';
    }
}

void write_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (int i = 0; i < vocab.n_nouns(); ++i) out << "noun " << i << ' ' << vocab.nouns[i] << '\n';
    for (int i = 0; i < vocab.n_attrs(); ++i) {
        out << (vocab.kind_of(i) == AttributeKind::color ? "color " : "texture ") << i << ' '
            << vocab.attribute_word(i) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Encoder

int TokenSequence::count(TokenClass c) const { return static_cast<int>(std::count(tags.begin(), tags.end(), c)); }

int TokenSequence::first_eos() const {
    auto it = std::find(tags.begin(), tags.end(), TokenClass::eos);
    return it == tags.end() ? -1 : static_cast<int>(it - tags.begin());
}

namespace {

std::vector<float> gaussian_block(Rng& rng, std::size_t n, double scale) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.gaussian() * scale);
    return v;
}

}  // namespace

PromptEncoder::PromptEncoder(const Vocabulary& vocab, const EncoderConfig& config) : vocab_(vocab), config_(config) {
    if (config.length < 5 || config.dim <= 0) {
        throw ParameterError("encoder needs length >= 5 (SOS + 3 SEM + EOS) and dim > 0");
    }
    const int d = config.dim;
    Rng rng(config.seed);
    int words = 1 + vocab.n_attrs() + vocab.n_nouns();
    sos_   = gaussian_block(rng, d, 1.0);
    table_ = gaussian_block(rng, static_cast<std::size_t>(words) * d, 1.0);
    rec_a_ = gaussian_block(rng, static_cast<std::size_t>(d) * d, 0.9 / std::sqrt(d));
    rec_b_ = gaussian_block(rng, static_cast<std::size_t>(d) * d, 1.0 / std::sqrt(d));

    std::vector<std::vector<float>> eos;
    eos.push_back(terminal_state({sos_}));
    for (int n = 0; n < vocab.n_nouns(); ++n) {
        for (int a = 0; a < vocab.n_attrs(); ++a) {
            TokenSequence s = encode(make_prompt(vocab, n, a));
            const float* e = s.token(s.first_eos());
            eos.emplace_back(e, e + d);
        }
    }
    double best = INFINITY;
    for (std::size_t i = 0; i < eos.size(); ++i) {
        for (std::size_t j = i + 1; j < eos.size(); ++j) {
            double s = 0.0;
            for (int k = 0; k < d; ++k) {
                double diff = static_cast<double>(eos[i][k]) - eos[j][k];
                s += diff * diff;
            }
            best = std::min(best, std::sqrt(s));
        }
    }
    min_eos_separation_ = best;
    if (!(best > 0.0)) throw ConfigurationError("prompt encoder is not injective over the vocabulary");
}

std::vector<float> PromptEncoder::word_embedding(int word) const {
    const float* row = table_.data() + static_cast<std::size_t>(word) * config_.dim;
    return {row, row + config_.dim};
}

std::vector<float> PromptEncoder::terminal_state(const std::vector<std::vector<float>>& inputs) const {
    const int d = config_.dim;
    std::vector<double> h(d, 0.0), next(d);
    for (const auto& e : inputs) {
        for (int i = 0; i < d; ++i) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                acc += static_cast<double>(rec_a_[i * d + j]) * h[j] + static_cast<double>(rec_b_[i * d + j]) * e[j];
            }
            next[i] = std::tanh(acc);
        }
        h.swap(next);
    }
    return {h.begin(), h.end()};
}

TokenSequence PromptEncoder::encode(const std::optional<PromptSpec>& prompt) const {
    const int d = config_.dim;
    const int L = config_.length;
    std::vector<std::vector<float>> inputs{sos_};
    if (prompt) {
        validate(vocab_, *prompt);
        inputs.push_back(word_embedding(0));
        inputs.push_back(word_embedding(1 + prompt->attribute_id));
        inputs.push_back(word_embedding(1 + vocab_.n_attrs() + prompt->noun_id));
    }
    std::vector<float> eos = terminal_state(inputs);

    TokenSequence s;
    s.length = L;
    s.dim    = d;
    s.tokens.resize(static_cast<std::size_t>(L) * d);
    s.tags.resize(L);
    s.provenance = prompt;
    for (int i = 0; i < L; ++i) {
        const std::vector<float>& src = i < static_cast<int>(inputs.size()) ? inputs[i] : eos;
        std::copy(src.begin(), src.end(), s.token(i));
        s.tags[i] = i == 0 ? TokenClass::sos : (i < static_cast<int>(inputs.size()) ? TokenClass::sem : TokenClass::eos);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Surgery

TokenSequence apply_surgery(const TokenSequence& a, const TokenSequence* b, const SurgerySpec& spec) {
    TokenSequence out = a;
    out.kv_scope = spec.kv_scope;
    const int d = a.dim;

    switch (spec.kind) {
        case SurgeryKind::switch_eos: {
            if (b == nullptr) throw ConfigurationError("switch_eos surgery needs a second sequence");
            if (b->dim != d) throw ShapeError("switch_eos: embedding dims differ");
            int src = b->first_eos();
            if (src < 0) throw DataError("switch_eos: source sequence has no EOS token");
            for (int i = 0; i < a.length; ++i) {
                if (a.tags[i] == TokenClass::eos) std::copy(b->token(src), b->token(src) + d, out.token(i));
            }
            break;
        }
        case SurgeryKind::zero_class:
        case SurgeryKind::random_class: {
            Rng rng(spec.seed);
            for (int i = 0; i < a.length; ++i) {
                if (a.tags[i] != spec.target_class) continue;
                float* tok = out.token(i);
                for (int k = 0; k < d; ++k) {
                    tok[k] = spec.kind == SurgeryKind::zero_class ? 0.0f : static_cast<float>(rng.gaussian());
                }
            }
            break;
        }
        case SurgeryKind::sos_only:
            for (int i = 1; i < a.length; ++i) std::copy(a.token(0), a.token(0) + d, out.token(i));
            break;
        case SurgeryKind::eos_only: {
            int e = a.first_eos();
            if (e < 0) throw DataError("eos_only: sequence has no EOS token");
            for (int i = 1; i < a.length; ++i) {
                std::copy(a.token(e), a.token(e) + d, out.token(i));
                out.tags[i] = TokenClass::eos;
            }
            break;
        }
        case SurgeryKind::repeat_sem: {
            int n_sem = a.count(TokenClass::sem);
            int e     = a.first_eos();
            if (spec.repeat_count < 1) throw ParameterError("repeat_sem: repeat_count must be >= 1");
            if (1 + spec.repeat_count * n_sem > a.length) {
                throw CapacityError("repeat_sem: 1 + " + std::to_string(spec.repeat_count) + " x " +
                                    std::to_string(n_sem) + " SEM tokens exceed length " + std::to_string(a.length));
            }
            if (e < 0 && 1 + spec.repeat_count * n_sem < a.length) {
                throw DataError("repeat_sem: no EOS token to pad with");
            }
            int pos = 1;
            for (int r = 0; r < spec.repeat_count; ++r) {
                for (int k = 0; k < n_sem; ++k, ++pos) {
                    std::copy(a.token(1 + k), a.token(1 + k) + d, out.token(pos));
                    out.tags[pos] = TokenClass::sem;
                }
            }
            for (; pos < a.length; ++pos) {
                std::copy(a.token(e), a.token(e) + d, out.token(pos));
                out.tags[pos] = TokenClass::eos;
            }
            break;
        }
    }
    return out;
}

}  // namespace dlab
