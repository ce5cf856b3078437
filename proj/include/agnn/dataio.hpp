#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "agnn/autodiff.hpp"

namespace agnn::data {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using NodeId = std::int32_t;

struct Rating {
    NodeId user = 0;
    NodeId item = 0;
    double value = 0.0;

    friend bool operator==(const Rating&, const Rating&) = default;
};

/// Ratings over densely indexed users and items. `user_ids[u]` is the raw
/// identifier of dense user u as it appeared in the source file.
struct RatingSet {
    std::vector<std::string> user_ids;
    std::vector<std::string> item_ids;
    std::vector<Rating> ratings;
    double mean = 0.0;

    std::size_t user_count() const { return user_ids.size(); }
    std::size_t item_count() const { return item_ids.size(); }
    double sparsity() const;

    friend bool operator==(const RatingSet&, const RatingSet&) = default;
};

struct RatingsFormat {
    char delimiter = '\t';
    int user_column = 0;
    int item_column = 1;
    int rating_column = 2;
    bool skip_header = false;
};

/// Parses user/item/rating[/timestamp] records. Raw ids are re-indexed from 0
/// in sorted order (numeric order when every id is an integer). Throws
/// DataError on an empty input, a malformed line (with its line number) or a
/// repeated (user, item) pair.
RatingSet parse_ratings(std::istream& in, const RatingsFormat& format = {});
RatingSet load_ratings(const std::filesystem::path& path, const RatingsFormat& format = {});
void write_ratings(std::ostream& out, const RatingSet& set, char delimiter = '\t');

double mean_rating(std::span<const Rating> ratings);

// ---------------------------------------------------------------------------
// Attributes

enum class FieldKind { Categorical, Multi, Bucket };

struct AttributeField {
    std::string name;
    std::string column;
    FieldKind kind = FieldKind::Categorical;
    std::vector<std::string> values;  // vocabulary in slot order (Categorical, Multi)
    std::vector<double> edges;        // ascending bucket edges (Bucket)
    char separator = '|';             // token separator (Multi)
    bool unknown_slot = false;        // trailing slot for values outside the vocabulary
    std::size_t offset = 0;           // first slot of this field in the K-wide row

    std::size_t width() const;
};

struct AttributeSchema {
    std::string key_column;
    std::vector<AttributeField> fields;

    /// Total encoding width K.
    std::size_t width() const;
    /// Recomputes the contiguous slot offsets from the field widths.
    void assign_offsets();
};

/// Delimited text with a header row naming the columns.
struct AttributeTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::size_t column_index(const std::string& name) const;
};

AttributeTable parse_attribute_table(std::istream& in, char delimiter = '\t');
AttributeTable load_attribute_table(const std::filesystem::path& path, char delimiter = '\t');

/// Fills the vocabulary of every categorical/multi field that has none from
/// the distinct values present in the table (sorted), then assigns offsets.
void infer_vocabulary(AttributeSchema& schema, const AttributeTable& table);

/// Sparse binary rows of width K.
struct MultiHotMatrix {
    std::size_t width = 0;
    std::vector<std::vector<std::uint32_t>> rows;  // sorted slot indices per node

    std::size_t node_count() const { return rows.size(); }
    ad::Tensor dense() const;
    ad::Tensor dense_rows(std::span<const NodeId> nodes) const;
};

/// Row n encodes the record whose key equals node_ids[n]; nodes without a
/// record get an all-zero row. A record keyed by an id not in node_ids is an
/// error.
MultiHotMatrix build_attribute_encoding(const AttributeTable& table, const AttributeSchema& schema,
                                        std::span<const std::string> node_ids);

struct SchemaConfig {
    AttributeSchema user;
    AttributeSchema item;
};

/// Reads the INI schema description: a [user] / [item] section holding
/// `key = <column>`, and one [user.<field>] / [item.<field>] section per field.
SchemaConfig load_schema(const std::filesystem::path& path);
SchemaConfig parse_schema(std::istream& in);

// ---------------------------------------------------------------------------
// Splits

/// Ratings plus both attribute encodings, aligned with the rating set's
/// dense ids. Vocabularies missing from the schema are inferred.
struct Dataset {
    RatingSet ratings;
    MultiHotMatrix user_attributes;
    MultiHotMatrix item_attributes;
};

Dataset load_dataset(const std::filesystem::path& ratings, const std::filesystem::path& user_attributes,
                     const std::filesystem::path& item_attributes, const std::filesystem::path& schema);

enum class SplitMode { Warm, ItemCold, UserCold };

std::string to_string(SplitMode mode);
SplitMode parse_split_mode(const std::string& s);

struct Split {
    SplitMode mode = SplitMode::Warm;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> user_ids;
    std::vector<std::string> item_ids;
    std::vector<Rating> train;
    std::vector<Rating> test;
    std::vector<NodeId> cold_ids;  // sorted; users or items depending on mode

    std::size_t user_count() const { return user_ids.size(); }
    std::size_t item_count() const { return item_ids.size(); }

    friend bool operator==(const Split&, const Split&) = default;
};

/// Picks floor(fraction * count) users or items and moves all of their
/// ratings to test.
Split split_cold_start(const RatingSet& ratings, double fraction, SplitMode mode, std::uint64_t seed);
/// Moves floor(fraction * |ratings|) uniformly chosen ratings to test.
Split split_warm(const RatingSet& ratings, double fraction, std::uint64_t seed);

/// Carves a random held-out part out of a training list (used for early
/// stopping). Returns {fit, held_out}; original order is kept in both.
std::pair<std::vector<Rating>, std::vector<Rating>> carve_validation(std::span<const Rating> train, double fraction,
                                                                     std::uint64_t seed);

nlohmann::json split_to_json(const Split& split);
Split split_from_json(const nlohmann::json& j);
void write_split(const std::filesystem::path& path, const Split& split);
Split read_split(const std::filesystem::path& path);

}  // namespace agnn::data
