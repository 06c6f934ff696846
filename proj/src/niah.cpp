#include "gapelab/niah.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <sstream>

namespace gapelab::niah {

Regime parse_regime(const std::string& s) {
    if (s == "first" || s == "needle-first" || s == "far") return Regime::First;
    if (s == "last" || s == "needle-last" || s == "close") return Regime::Last;
    if (s == "middle" || s == "needle-middle") return Regime::Middle;
    throw Error("unknown regime '" + s + "'");
}

std::string regime_name(Regime r) {
    switch (r) {
    case Regime::First: return "first";
    case Regime::Last: return "last";
    case Regime::Middle: return "middle";
    }
    return "?";
}

std::size_t NiahSample::target_digit_position() const {
    if (needle_positions.empty()) throw Error("sample has no needles");
    const std::size_t n = needle_positions.size();
    const std::size_t idx = regime == Regime::First ? 0 : regime == Regime::Last ? n - 1 : n / 2;
    return needle_positions[idx] + 2;
}

std::size_t default_needle_count(std::size_t length) { return length / 64; }

NiahSample generate(std::size_t length, Regime regime, Rng& rng, std::optional<std::size_t> n_override) {
    const std::size_t n = n_override.value_or(default_needle_count(length));
    if (n == 0) throw Error("niah: need at least one needle (L >= 64 or an explicit count)");
    if (3 * n + 1 > length) throw Error("niah: " + std::to_string(n) + " needles do not fit in length " +
                                        std::to_string(length));
    const std::size_t prefix = length - 1;
    NiahSample s;
    s.regime = regime;
    s.tokens.resize(length);
    for (std::size_t p = 0; p < prefix; ++p)
        s.tokens[p] = static_cast<Token>(NiahVocab::kFirstFiller + rng.below(NiahVocab::kFillers));
    s.tokens[prefix] = NiahVocab::kQuery;

    std::size_t next_free = 0;  // first position not covered by an earlier needle
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t lo = c * prefix / n;
        const std::size_t hi = (c + 1) * prefix / n;
        std::optional<std::size_t> start;
        for (int attempt = 0; attempt < 100 && !start; ++attempt) {
            const std::size_t cand = lo + rng.below(hi - lo);
            if (cand + 3 <= prefix && cand >= next_free) start = cand;
        }
        if (!start) throw Error("niah: could not place needle " + std::to_string(c) + " without overlap");
        const auto digit = static_cast<std::uint8_t>(rng.below(NiahVocab::kDigits));
        s.tokens[*start] = NiahVocab::kKey;
        s.tokens[*start + 1] = NiahVocab::kEq;
        s.tokens[*start + 2] = static_cast<Token>(NiahVocab::kFirstDigit + digit);
        s.needle_positions.push_back(*start);
        s.needle_digits.push_back(digit);
        next_free = *start + 3;
    }
    const std::size_t idx = regime == Regime::First ? 0 : regime == Regime::Last ? n - 1 : n / 2;
    s.target = s.needle_digits[idx];
    return s;
}

NiahSample generate_indexed(std::size_t length, Regime regime, std::uint64_t seed, std::uint64_t index,
                            std::optional<std::size_t> n_override) {
    Rng rng(derive_seed(seed, index));
    return generate(length, regime, rng, n_override);
}

Decoded decode_target(const NiahSample& sample, std::span<const double> digit_logits) {
    if (digit_logits.size() != NiahVocab::kDigits) throw Error("decode_target: expected 10 digit logits");
    std::size_t best = 0;
    for (std::size_t d = 1; d < digit_logits.size(); ++d)
        if (digit_logits[d] > digit_logits[best]) best = d;
    return {static_cast<std::uint8_t>(best), best == sample.target};
}

std::vector<std::pair<std::size_t, std::uint8_t>> parse_needles(std::span<const Token> tokens) {
    std::vector<std::pair<std::size_t, std::uint8_t>> found;
    for (std::size_t p = 0; p + 2 < tokens.size(); ++p) {
        if (tokens[p] == NiahVocab::kKey && tokens[p + 1] == NiahVocab::kEq && NiahVocab::is_digit(tokens[p + 2]))
            found.emplace_back(p, static_cast<std::uint8_t>(tokens[p + 2]));
    }
    return found;
}

void write_dataset(std::ostream& os, const DatasetHeader& h, std::span<const NiahSample> samples) {
    os << "niah L=" << h.length << " n=" << h.needles << " regime=" << regime_name(h.regime)
       << " seed=" << h.seed << " count=" << h.count << '\n';
    for (const auto& s : samples) {
        for (std::size_t p = 0; p < s.tokens.size(); ++p) os << (p ? " " : "") << static_cast<int>(s.tokens[p]);
        os << " |";
        for (std::size_t k = 0; k < s.needle_positions.size(); ++k)
            os << ' ' << s.needle_positions[k] << ':' << static_cast<int>(s.needle_digits[k]);
        os << " | " << static_cast<int>(s.target) << '\n';
    }
}

namespace {

std::string header_field(std::istringstream& in, const std::string& key) {
    std::string tok;
    if (!(in >> tok) || tok.rfind(key + "=", 0) != 0) throw Error("niah dataset: missing header field " + key);
    return tok.substr(key.size() + 1);
}

} // namespace

std::pair<DatasetHeader, std::vector<NiahSample>> read_dataset(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw Error("niah dataset: empty input");
    std::istringstream hs(line);
    std::string magic;
    hs >> magic;
    if (magic != "niah") throw Error("niah dataset: bad magic");
    DatasetHeader h;
    h.length = std::stoul(header_field(hs, "L"));
    h.needles = std::stoul(header_field(hs, "n"));
    h.regime = parse_regime(header_field(hs, "regime"));
    h.seed = std::stoull(header_field(hs, "seed"));
    h.count = std::stoul(header_field(hs, "count"));

    std::vector<NiahSample> samples;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto bar1 = line.find('|');
        const auto bar2 = line.find('|', bar1 + 1);
        if (bar1 == std::string::npos || bar2 == std::string::npos) throw Error("niah dataset: malformed record");
        NiahSample s;
        s.regime = h.regime;
        std::istringstream ts(line.substr(0, bar1));
        int v;
        while (ts >> v) {
            if (v < 0 || v >= static_cast<int>(NiahVocab::kSize)) throw Error("niah dataset: token out of range");
            s.tokens.push_back(static_cast<Token>(v));
        }
        std::istringstream ns(line.substr(bar1 + 1, bar2 - bar1 - 1));
        std::string pair;
        while (ns >> pair) {
            const auto colon = pair.find(':');
            if (colon == std::string::npos) throw Error("niah dataset: malformed needle entry");
            s.needle_positions.push_back(std::stoul(pair.substr(0, colon)));
            s.needle_digits.push_back(static_cast<std::uint8_t>(std::stoul(pair.substr(colon + 1))));
        }
        s.target = static_cast<std::uint8_t>(std::stoul(line.substr(bar2 + 1)));
        if (s.tokens.size() != h.length) throw Error("niah dataset: record length disagrees with header");
        samples.push_back(std::move(s));
    }
    if (samples.size() != h.count) throw Error("niah dataset: record count disagrees with header");
    return {h, std::move(samples)};
}

} // namespace gapelab::niah
