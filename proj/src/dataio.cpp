#include "agnn/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "agnn/rng.hpp"

namespace agnn::data {

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == delim) {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

bool getline_clean(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    const auto t = trim(s);
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty()) return std::nullopt;
    return v;
}

std::optional<long long> parse_integer(std::string_view s) {
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

/// Sorted raw ids: numeric order when all are integers, lexicographic otherwise.
std::vector<std::string> sorted_ids(const std::unordered_set<std::string>& raw) {
    std::vector<std::string> ids(raw.begin(), raw.end());
    const bool numeric = std::all_of(ids.begin(), ids.end(), [](const auto& s) { return parse_integer(s).has_value(); });
    if (numeric)
        std::sort(ids.begin(), ids.end(), [](const auto& a, const auto& b) { return *parse_integer(a) < *parse_integer(b); });
    else
        std::sort(ids.begin(), ids.end());
    return ids;
}

std::unordered_map<std::string, NodeId> index_of(const std::vector<std::string>& ids) {
    std::unordered_map<std::string, NodeId> m;
    for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], static_cast<NodeId>(i));
    return m;
}

void check_fraction(double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw DataError("split fraction must lie in [0, 1), got " + std::to_string(fraction));
}

}  // namespace

double RatingSet::sparsity() const {
    const double cells = static_cast<double>(user_count()) * static_cast<double>(item_count());
    return cells == 0.0 ? 1.0 : 1.0 - static_cast<double>(ratings.size()) / cells;
}

double mean_rating(std::span<const Rating> ratings) {
    if (ratings.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : ratings) s += r.value;
    return s / static_cast<double>(ratings.size());
}

RatingSet parse_ratings(std::istream& in, const RatingsFormat& format) {
    struct RawRecord {
        std::string user, item;
        double value;
    };
    std::vector<RawRecord> raw;
    std::string line;
    std::size_t lineno = 0;
    const int need = std::max({format.user_column, format.item_column, format.rating_column}) + 1;
    while (getline_clean(in, line)) {
        ++lineno;
        if (lineno == 1 && format.skip_header) continue;
        if (trim(line).empty()) continue;
        auto cols = split_line(line, format.delimiter);
        if (static_cast<int>(cols.size()) < need)
            throw DataError("ratings line " + std::to_string(lineno) + ": expected at least " + std::to_string(need) +
                            " columns, got " + std::to_string(cols.size()));
        auto value = parse_double(cols[format.rating_column]);
        if (!value || !std::isfinite(*value))
            throw DataError("ratings line " + std::to_string(lineno) + ": bad rating '" + cols[format.rating_column] + "'");
        auto user = trim(cols[format.user_column]);
        auto item = trim(cols[format.item_column]);
        if (user.empty() || item.empty()) throw DataError("ratings line " + std::to_string(lineno) + ": empty id");
        raw.push_back({std::move(user), std::move(item), *value});
    }
    if (raw.empty()) throw DataError("ratings input is empty");

    std::unordered_set<std::string> users, items;
    for (const auto& r : raw) {
        users.insert(r.user);
        items.insert(r.item);
    }
    RatingSet set;
    set.user_ids = sorted_ids(users);
    set.item_ids = sorted_ids(items);
    const auto uidx = index_of(set.user_ids);
    const auto iidx = index_of(set.item_ids);

    std::unordered_set<std::uint64_t> seen;
    set.ratings.reserve(raw.size());
    for (const auto& r : raw) {
        Rating t{uidx.at(r.user), iidx.at(r.item), r.value};
        const auto key = (static_cast<std::uint64_t>(t.user) << 32) | static_cast<std::uint32_t>(t.item);
        if (!seen.insert(key).second) throw DataError("duplicate rating for user '" + r.user + "', item '" + r.item + "'");
        set.ratings.push_back(t);
    }
    set.mean = mean_rating(set.ratings);
    return set;
}

RatingSet load_ratings(const std::filesystem::path& path, const RatingsFormat& format) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open ratings file " + path.string());
    return parse_ratings(in, format);
}

void write_ratings(std::ostream& out, const RatingSet& set, char delimiter) {
    char buf[64];
    for (const auto& r : set.ratings) {
        auto res = std::to_chars(buf, buf + sizeof buf, r.value);
        out << set.user_ids[r.user] << delimiter << set.item_ids[r.item] << delimiter
            << std::string_view(buf, res.ptr - buf) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Attributes

std::size_t AttributeField::width() const {
    const std::size_t base = kind == FieldKind::Bucket ? edges.size() + 1 : values.size();
    return base + (unknown_slot ? 1 : 0);
}

std::size_t AttributeSchema::width() const {
    std::size_t k = 0;
    for (const auto& f : fields) k += f.width();
    return k;
}

void AttributeSchema::assign_offsets() {
    std::size_t off = 0;
    for (auto& f : fields) {
        f.offset = off;
        off += f.width();
    }
}

std::size_t AttributeTable::column_index(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw DataError("attribute table has no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
}

AttributeTable parse_attribute_table(std::istream& in, char delimiter) {
    AttributeTable t;
    std::string line;
    if (!getline_clean(in, line)) throw DataError("attribute table is empty (no header)");
    for (auto& c : split_line(line, delimiter)) t.columns.push_back(trim(c));
    std::size_t lineno = 1;
    while (getline_clean(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto cols = split_line(line, delimiter);
        if (cols.size() != t.columns.size())
            throw DataError("attribute line " + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                            " columns, got " + std::to_string(cols.size()));
        t.rows.push_back(std::move(cols));
    }
    return t;
}

AttributeTable load_attribute_table(const std::filesystem::path& path, char delimiter) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open attribute file " + path.string());
    return parse_attribute_table(in, delimiter);
}

namespace {

std::vector<std::string> field_tokens(const AttributeField& f, const std::string& cell) {
    std::vector<std::string> out;
    if (f.kind == FieldKind::Multi) {
        for (auto& tok : split_line(cell, f.separator)) {
            auto t = trim(tok);
            if (!t.empty()) out.push_back(std::move(t));
        }
    } else {
        auto t = trim(cell);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

void infer_vocabulary(AttributeSchema& schema, const AttributeTable& table) {
    for (auto& f : schema.fields) {
        if (f.kind == FieldKind::Bucket || !f.values.empty()) continue;
        const auto col = table.column_index(f.column);
        std::set<std::string> distinct;
        for (const auto& row : table.rows)
            for (auto& tok : field_tokens(f, row[col])) distinct.insert(std::move(tok));
        f.values.assign(distinct.begin(), distinct.end());
    }
    schema.assign_offsets();
}

ad::Tensor MultiHotMatrix::dense() const {
    ad::Tensor t = ad::Tensor::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
    for (std::size_t n = 0; n < rows.size(); ++n)
        for (auto s : rows[n]) t(static_cast<Eigen::Index>(n), s) = 1.0;
    return t;
}

ad::Tensor MultiHotMatrix::dense_rows(std::span<const NodeId> nodes) const {
    ad::Tensor t = ad::Tensor::Zero(static_cast<Eigen::Index>(nodes.size()), static_cast<Eigen::Index>(width));
    for (std::size_t n = 0; n < nodes.size(); ++n)
        for (auto s : rows.at(static_cast<std::size_t>(nodes[n]))) t(static_cast<Eigen::Index>(n), s) = 1.0;
    return t;
}

MultiHotMatrix build_attribute_encoding(const AttributeTable& table, const AttributeSchema& schema,
                                        std::span<const std::string> node_ids) {
    MultiHotMatrix m;
    m.width = schema.width();
    m.rows.resize(node_ids.size());
    if (table.rows.empty()) return m;

    std::unordered_map<std::string, std::size_t> node_index;
    for (std::size_t i = 0; i < node_ids.size(); ++i) node_index.emplace(node_ids[i], i);
    const auto key_col = table.column_index(schema.key_column);

    struct FieldLookup {
        std::size_t column;
        std::unordered_map<std::string, std::size_t> slot;
    };
    std::vector<FieldLookup> lookups;
    for (const auto& f : schema.fields) {
        FieldLookup l{table.column_index(f.column), {}};
        for (std::size_t v = 0; v < f.values.size(); ++v) l.slot.emplace(f.values[v], v);
        lookups.push_back(std::move(l));
    }

    for (const auto& row : table.rows) {
        const auto key = trim(row[key_col]);
        auto it = node_index.find(key);
        if (it == node_index.end()) throw DataError("attribute record for unknown node id '" + key + "'");
        std::set<std::uint32_t> slots;
        for (std::size_t fi = 0; fi < schema.fields.size(); ++fi) {
            const auto& f = schema.fields[fi];
            const auto unknown = [&]() -> std::optional<std::size_t> {
                if (f.unknown_slot) return f.width() - 1;
                return std::nullopt;
            };
            const auto tokens = field_tokens(f, row[lookups[fi].column]);
            if (tokens.empty()) {
                if (auto u = unknown()) slots.insert(static_cast<std::uint32_t>(f.offset + *u));
                continue;
            }
            for (const auto& tok : tokens) {
                std::optional<std::size_t> local;
                if (f.kind == FieldKind::Bucket) {
                    if (auto v = parse_double(tok))
                        local = static_cast<std::size_t>(std::upper_bound(f.edges.begin(), f.edges.end(), *v) - f.edges.begin());
                } else if (auto s = lookups[fi].slot.find(tok); s != lookups[fi].slot.end()) {
                    local = s->second;
                }
                if (!local) local = unknown();
                if (!local) throw DataError("field '" + f.name + "': value '" + tok + "' is outside the vocabulary");
                slots.insert(static_cast<std::uint32_t>(f.offset + *local));
            }
        }
        m.rows[it->second].assign(slots.begin(), slots.end());
    }
    return m;
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    for (auto& part : split_line(s, ',')) {
        auto t = trim(part);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

char parse_separator(const std::string& s) {
    if (s == "space") return ' ';
    if (s == "tab") return '\t';
    if (s == "pipe") return '|';
    if (s == "comma") return ',';
    if (s.size() == 1) return s[0];
    throw DataError("schema: bad separator '" + s + "'");
}

AttributeField parse_field(const std::string& name, const boost::property_tree::ptree& sec) {
    AttributeField f;
    f.name = name;
    f.column = sec.get<std::string>("column", name);
    const auto kind = sec.get<std::string>("kind", "categorical");
    if (kind == "categorical")
        f.kind = FieldKind::Categorical;
    else if (kind == "multi")
        f.kind = FieldKind::Multi;
    else if (kind == "bucket")
        f.kind = FieldKind::Bucket;
    else
        throw DataError("schema field '" + name + "': unknown kind '" + kind + "'");
    f.values = split_list(sec.get<std::string>("values", ""));
    for (const auto& e : split_list(sec.get<std::string>("edges", ""))) {
        auto v = parse_double(e);
        if (!v) throw DataError("schema field '" + name + "': bad bucket edge '" + e + "'");
        f.edges.push_back(*v);
    }
    if (!std::is_sorted(f.edges.begin(), f.edges.end()))
        throw DataError("schema field '" + name + "': bucket edges must ascend");
    if (f.kind == FieldKind::Bucket && f.edges.empty())
        throw DataError("schema field '" + name + "': bucket field needs edges");
    f.separator = parse_separator(sec.get<std::string>("separator", "pipe"));
    // A closed vocabulary gets an UNKNOWN slot unless told otherwise.
    f.unknown_slot = sec.get<bool>("unknown", !f.values.empty());
    return f;
}

}  // namespace

SchemaConfig parse_schema(std::istream& in) {
    boost::property_tree::ptree pt;
    try {
        boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw DataError(std::string("schema: ") + e.what());
    }
    SchemaConfig cfg;
    bool have_user = false, have_item = false;
    for (const auto& [section, body] : pt) {
        if (section == "user") {
            cfg.user.key_column = body.get<std::string>("key", "user_id");
            have_user = true;
        } else if (section == "item") {
            cfg.item.key_column = body.get<std::string>("key", "item_id");
            have_item = true;
        } else if (section.rfind("user.", 0) == 0) {
            cfg.user.fields.push_back(parse_field(section.substr(5), body));
        } else if (section.rfind("item.", 0) == 0) {
            cfg.item.fields.push_back(parse_field(section.substr(5), body));
        } else {
            throw DataError("schema: unexpected section [" + section + "]");
        }
    }
    if (!have_user || !have_item) throw DataError("schema: both [user] and [item] sections are required");
    cfg.user.assign_offsets();
    cfg.item.assign_offsets();
    return cfg;
}

SchemaConfig load_schema(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema file " + path.string());
    return parse_schema(in);
}

// ---------------------------------------------------------------------------
// Splits

std::string to_string(SplitMode mode) {
    switch (mode) {
        case SplitMode::Warm: return "warm";
        case SplitMode::ItemCold: return "item-cold";
        case SplitMode::UserCold: return "user-cold";
    }
    return "?";
}

SplitMode parse_split_mode(const std::string& s) {
    if (s == "warm") return SplitMode::Warm;
    if (s == "item-cold") return SplitMode::ItemCold;
    if (s == "user-cold") return SplitMode::UserCold;
    throw DataError("unknown split mode '" + s + "'");
}

Split split_cold_start(const RatingSet& ratings, double fraction, SplitMode mode, std::uint64_t seed) {
    check_fraction(fraction);
    if (mode == SplitMode::Warm) throw DataError("split_cold_start needs item-cold or user-cold mode");
    const bool items = mode == SplitMode::ItemCold;
    const std::size_t count = items ? ratings.item_count() : ratings.user_count();
    const auto n_cold = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(count)));

    std::vector<NodeId> ids(count);
    std::iota(ids.begin(), ids.end(), 0);
    auto rng = make_rng(seed, "split");
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(n_cold);
    std::sort(ids.begin(), ids.end());

    std::vector<char> cold(count, 0);
    for (auto id : ids) cold[static_cast<std::size_t>(id)] = 1;

    Split s;
    s.mode = mode;
    s.fraction = fraction;
    s.seed = seed;
    s.user_ids = ratings.user_ids;
    s.item_ids = ratings.item_ids;
    s.cold_ids = std::move(ids);
    for (const auto& r : ratings.ratings) {
        const auto node = static_cast<std::size_t>(items ? r.item : r.user);
        (cold[node] ? s.test : s.train).push_back(r);
    }
    if (s.train.empty()) throw DataError("cold split leaves no training ratings");
    return s;
}

Split split_warm(const RatingSet& ratings, double fraction, std::uint64_t seed) {
    check_fraction(fraction);
    const std::size_t n = ratings.ratings.size();
    const auto n_test = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, "split");
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> is_test(n, 0);
    for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = 1;

    Split s;
    s.mode = SplitMode::Warm;
    s.fraction = fraction;
    s.seed = seed;
    s.user_ids = ratings.user_ids;
    s.item_ids = ratings.item_ids;
    for (std::size_t k = 0; k < n; ++k) (is_test[k] ? s.test : s.train).push_back(ratings.ratings[k]);
    if (s.train.empty()) throw DataError("warm split leaves no training ratings");
    return s;
}

std::pair<std::vector<Rating>, std::vector<Rating>> carve_validation(std::span<const Rating> train, double fraction,
                                                                     std::uint64_t seed) {
    check_fraction(fraction);
    const std::size_t n = train.size();
    const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, "validation");
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> held(n, 0);
    for (std::size_t k = 0; k < n_val; ++k) held[order[k]] = 1;
    std::pair<std::vector<Rating>, std::vector<Rating>> out;
    for (std::size_t k = 0; k < n; ++k) (held[k] ? out.second : out.first).push_back(train[k]);
    return out;
}

namespace {

nlohmann::json triples_to_json(const std::vector<Rating>& v) {
    auto arr = nlohmann::json::array();
    for (const auto& r : v) arr.push_back({r.user, r.item, r.value});
    return arr;
}

std::vector<Rating> triples_from_json(const nlohmann::json& arr, std::size_t users, std::size_t items) {
    std::vector<Rating> v;
    v.reserve(arr.size());
    for (const auto& t : arr) {
        Rating r{t.at(0).get<NodeId>(), t.at(1).get<NodeId>(), t.at(2).get<double>()};
        if (r.user < 0 || static_cast<std::size_t>(r.user) >= users || r.item < 0 || static_cast<std::size_t>(r.item) >= items)
            throw DataError("split file: rating references an out-of-range node");
        v.push_back(r);
    }
    return v;
}

}  // namespace

nlohmann::json split_to_json(const Split& s) {
    return {
        {"mode", to_string(s.mode)},
        {"fraction", s.fraction},
        {"seed", s.seed},
        {"user_ids", s.user_ids},
        {"item_ids", s.item_ids},
        {"cold_ids", s.cold_ids},
        {"train", triples_to_json(s.train)},
        {"test", triples_to_json(s.test)},
    };
}

Split split_from_json(const nlohmann::json& j) {
    Split s;
    try {
        s.mode = parse_split_mode(j.at("mode").get<std::string>());
        s.fraction = j.at("fraction").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.user_ids = j.at("user_ids").get<std::vector<std::string>>();
        s.item_ids = j.at("item_ids").get<std::vector<std::string>>();
        s.cold_ids = j.at("cold_ids").get<std::vector<NodeId>>();
        s.train = triples_from_json(j.at("train"), s.user_count(), s.item_count());
        s.test = triples_from_json(j.at("test"), s.user_count(), s.item_count());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed split file: ") + e.what());
    }
    return s;
}

void write_split(const std::filesystem::path& path, const Split& split) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write split file " + path.string());
    out << split_to_json(split).dump() << '\n';
}

Split read_split(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open split file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed split file " + path.string() + ": " + e.what());
    }
    return split_from_json(j);
}

Dataset load_dataset(const std::filesystem::path& ratings, const std::filesystem::path& user_attributes,
                     const std::filesystem::path& item_attributes, const std::filesystem::path& schema) {
    Dataset d;
    d.ratings = load_ratings(ratings);
    SchemaConfig cfg = load_schema(schema);
    const AttributeTable users = load_attribute_table(user_attributes);
    const AttributeTable items = load_attribute_table(item_attributes);
    infer_vocabulary(cfg.user, users);
    infer_vocabulary(cfg.item, items);
    d.user_attributes = build_attribute_encoding(users, cfg.user, d.ratings.user_ids);
    d.item_attributes = build_attribute_encoding(items, cfg.item, d.ratings.item_ids);
    return d;
}

}  // namespace agnn::data
